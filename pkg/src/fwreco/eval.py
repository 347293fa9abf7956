"""Weighted ROC/AUC, class-separation histograms, splits and level importance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .classifier import MAP_DIM, Model, map_term_features
from .features import LEVELS, FeatureTable, ScopeLevel, class_normalized_weights, level_of

SIDES = ("allow", "deny")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def _as_positive(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=object)
    out = np.empty(labels.shape, dtype=bool)
    for i, lbl in enumerate(labels):
        lbl = getattr(lbl, "value", lbl)
        if lbl in ("allow", 1, 1.0, True):
            out[i] = True
        elif lbl in ("deny", -1, -1.0, 0, 0.0, False):
            out[i] = False
        else:
            raise ValueError(f"unknown label {lbl!r}")
    return out


def weighted_roc_auc(scores, labels, weights) -> tuple[float, list[RocPoint]]:
    """Weighted ROC curve over distinct score thresholds and its trapezoidal area.

    A sample counts as predicted-allow at threshold ``t`` iff its score is
    ``>= t``. Tied scores move together, which makes the area equal to the
    weighted Mann-Whitney statistic with ties counted one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    pos = _as_positive(labels)
    if not (s.shape == w.shape == pos.shape):
        raise ValueError("scores, labels and weights must have equal length")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    p_total = w[pos].sum()
    n_total = w[~pos].sum()
    if p_total <= 0 or n_total <= 0:
        raise ValueError("weighted ROC needs both classes with positive total weight")

    order = np.argsort(-s, kind="mergesort")
    s, w, pos = s[order], w[order], pos[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.append(distinct, s.size - 1)
    tp = np.cumsum(np.where(pos, w, 0.0))[ends]
    fp = np.cumsum(np.where(pos, 0.0, w))[ends]
    tpr = np.concatenate(([0.0], tp / p_total))
    fpr = np.concatenate(([0.0], fp / n_total))
    thresholds = np.concatenate(([np.inf], s[ends]))
    tpr[-1] = fpr[-1] = 1.0
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    auc = min(1.0, max(0.0, auc))  # rounding can overshoot by a few ulps
    curve = [RocPoint(float(t), float(a), float(b)) for t, a, b in zip(thresholds, tpr, fpr)]
    return auc, curve


def pairwise_auc(scores, labels, weights) -> float:
    """Quadratic-time weighted Mann-Whitney statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    pos = _as_positive(labels)
    sa, wa = s[pos], w[pos]
    sd, wd = s[~pos], w[~pos]
    wins = (sa[:, None] > sd[None, :]) + 0.5 * (sa[:, None] == sd[None, :])
    return float(wa @ wins @ wd / (wa.sum() * wd.sum()))


def roc_frame(curve: Sequence[RocPoint]) -> pd.DataFrame:
    return pd.DataFrame({"threshold": [p.threshold for p in curve],
                         "fpr": [p.fpr for p in curve],
                         "tpr": [p.tpr for p in curve]})


def renormalize(table: FeatureTable) -> FeatureTable:
    """Recompute class-normalized sample weights from importance within ``table``."""
    has = pd.notna(table.label)
    sw = np.zeros(len(table))
    if has.any():
        sw[has] = class_normalized_weights(zip(table.importance[has], table.label[has]))
    return FeatureTable(table.keys, table.X, table.label, table.importance, sw)


def split_dataset(samples: FeatureTable, ratios=(0.6, 0.2, 0.2), seed: int = 0
                  ) -> tuple[FeatureTable, FeatureTable, FeatureTable]:
    """Seeded split by endpoint; every endpoint's rows land in exactly one part.

    Sample weights are re-normalized per class within each part.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    endpoints = sorted(set(samples.endpoints))
    if len(endpoints) < 3:
        raise ValueError(f"need at least 3 endpoints to split, got {len(endpoints)}")
    rng = np.random.default_rng(seed)
    shuffled = [endpoints[i] for i in rng.permutation(len(endpoints))]
    n = len(shuffled)
    cut1 = int(round(ratios[0] * n))
    cut2 = int(round((ratios[0] + ratios[1]) * n))
    part_of = {}
    for pos, ep in enumerate(shuffled):
        part_of[ep] = 0 if pos < cut1 else (1 if pos < cut2 else 2)
    assignment = np.array([part_of[ep] for ep in samples.endpoints], dtype=int)
    return tuple(renormalize(samples.subset(np.flatnonzero(assignment == k))) for k in range(3))


def class_separation_histogram(scores, labels, weights, bins: int = 20) -> pd.DataFrame:
    """Equal-width bins over the score range with total weight per class."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    s = np.asarray(scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    pos = _as_positive(labels)
    lo, hi = (float(s.min()), float(s.max())) if s.size else (0.0, 1.0)
    if hi == lo:
        edges = np.linspace(lo, lo + 1.0, bins + 1)
    else:
        edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, bins - 1)
    allow = np.bincount(idx[pos], weights=w[pos], minlength=bins)
    deny = np.bincount(idx[~pos], weights=w[~pos], minlength=bins)
    return pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:],
                         "allow_weight": allow, "deny_weight": deny})


@dataclass(frozen=True)
class LevelImportance:
    """Share of absolute weight each scope level contributes, per pushing side."""

    shares: dict  # (ScopeLevel, side) -> fraction
    attribution: str = "absolute-weight"

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(lvl.value, side, self.shares[(lvl, side)]) for side in SIDES for lvl in LEVELS],
            columns=["level", "side", "percentage"],
        )


def feature_level_importance(model: Model) -> LevelImportance:
    """Attribute |weight| of each map coordinate to the levels of its base features.

    Products of features from two different levels split half and half; the
    bias carries no level. Positive weights push toward allow, negative ones
    toward deny, and each side is normalized separately. A side with no
    weight at all reports zeros.
    """
    w = np.asarray(model.weights, dtype=np.float64)
    if w.shape != (MAP_DIM,):
        raise ValueError("model weights have the wrong dimension")
    if not np.any(w[1:]):
        raise ValueError("model has all-zero feature weights")
    totals = {(lvl, side): 0.0 for lvl in LEVELS for side in SIDES}
    for k in range(1, MAP_DIM):
        if w[k] == 0.0:
            continue
        side = "allow" if w[k] > 0 else "deny"
        members = map_term_features(k)
        levels = [level_of(f) for f in members]
        share = abs(w[k]) / len(levels)
        for lvl in levels:
            totals[(lvl, side)] += share
    shares = {}
    for side in SIDES:
        side_total = sum(totals[(lvl, side)] for lvl in LEVELS)
        for lvl in LEVELS:
            shares[(lvl, side)] = totals[(lvl, side)] / side_total if side_total > 0 else 0.0
    return LevelImportance(shares)
