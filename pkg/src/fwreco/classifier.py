"""Allow/deny classifiers: the seen-IP baseline and a weighted soft-margin SVM.

The SVM works on an explicit degree-2 polynomial expansion of the
standardized features and is trained with seeded stochastic subgradient
steps on the importance-weighted hinge objective.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .features import FEATURE_ORDER_HASH, N_FEATURES, FeatureTable

log = logging.getLogger(__name__)

MODEL_VERSION = 1
DEFAULT_LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_EPOCHS = 20
AUC_TIE_TOL = 1e-12  # validation AUCs closer than this count as tied

_IU, _JU = np.triu_indices(N_FEATURES)
MAP_DIM = 1 + N_FEATURES + _IU.size  # 3655


class ModelFileError(ValueError):
    """Model file is corrupt, truncated or of an unsupported version."""


# --- quadratic feature map ---------------------------------------------------------

def quadratic_map(x) -> np.ndarray:
    """``[1, x_0..x_{d-1}, x_i * x_j for i <= j]`` with i-major pair order.

    All coefficients are 1, so ``<phi(x), phi(y)>`` equals
    ``1 + <x,y> + (<x,y>**2 + sum_i (x_i y_i)**2) / 2``; see
    :func:`quadratic_kernel`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (N_FEATURES,):
        raise ValueError(f"expected {N_FEATURES} features, got shape {x.shape}")
    return np.concatenate(([1.0], x, x[_IU] * x[_JU]))


def quadratic_map_batch(X: np.ndarray, bias: bool = True) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ValueError(f"expected (n, {N_FEATURES}) features, got shape {X.shape}")
    off = 1 if bias else 0
    out = np.empty((X.shape[0], MAP_DIM - 1 + off))
    if bias:
        out[:, 0] = 1.0
    out[:, off:off + N_FEATURES] = X
    col = off + N_FEATURES
    for i in range(N_FEATURES):
        width = N_FEATURES - i
        np.multiply(X[:, i:i + 1], X[:, i:], out=out[:, col:col + width])
        col += width
    return out


def quadratic_kernel(x, y) -> float:
    """Closed form of ``<quadratic_map(x), quadratic_map(y)>``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dot = float(x @ y)
    return 1.0 + dot + 0.5 * (dot * dot + float(np.sum((x * y) ** 2)))


def map_term_features(index: int) -> tuple[int, ...]:
    """Base-feature indices a quadratic-map coordinate is built from (empty for bias)."""
    if index == 0:
        return ()
    if index <= N_FEATURES:
        return (index - 1,)
    k = index - 1 - N_FEATURES
    return (int(_IU[k]), int(_JU[k]))


# --- standardization -------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    std_devs: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, weights: np.ndarray | None = None) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        if weights is None:
            weights = np.ones(X.shape[0])
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if total <= 0:
            raise ValueError("standardizer weights must have positive total")
        means = weights @ X / total
        var = weights @ (X - means) ** 2 / total
        std = np.sqrt(var)
        std[~(std > 1e-12)] = 1.0
        return cls(means, std)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.means) / self.std_devs

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.std_devs + self.means


# --- models ------------------------------------------------------------------------

@dataclass
class Model:
    standardizer: Standardizer
    weights: np.ndarray  # quadratic-map layout, bias at index 0
    regularization: float
    threshold: float = 0.0
    seed: int | None = None
    feature_order_hash: str = FEATURE_ORDER_HASH
    created_at: float | None = None
    objective_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (MAP_DIM,):
            raise ValueError(f"weights must have length {MAP_DIM}, got {self.weights.shape}")
        if not self.regularization > 0:
            raise ValueError("regularization must be positive")

    def decision(self, X: np.ndarray) -> np.ndarray:
        """Scores for raw (unstandardized) feature rows."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {X.shape[1]}")
        Z = self.standardizer.transform(X)
        out = np.empty(Z.shape[0])
        for lo in range(0, Z.shape[0], 2048):
            out[lo:lo + 2048] = quadratic_map_batch(Z[lo:lo + 2048]) @ self.weights
        return out

    def predict_allow(self, X: np.ndarray) -> np.ndarray:
        return self.decision(X) >= self.threshold


def score(model: Model, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (N_FEATURES,):
        raise ValueError(f"expected {N_FEATURES} features, got shape {x.shape}")
    return float(quadratic_map(model.standardizer.transform(x)) @ model.weights)


# --- objective ---------------------------------------------------------------------

def objective(w: np.ndarray, Phi: np.ndarray, y: np.ndarray, sample_weight: np.ndarray, lam: float) -> float:
    """``lam/2 * |w[1:]|^2 + sum_i sw_i * max(0, 1 - y_i <w, phi_i>)``; ``Phi`` includes the bias column."""
    margins = y * (Phi @ w)
    return 0.5 * lam * float(w[1:] @ w[1:]) + float(sample_weight @ np.maximum(0.0, 1.0 - margins))


def subgradient(w: np.ndarray, Phi: np.ndarray, y: np.ndarray, sample_weight: np.ndarray, lam: float) -> np.ndarray:
    active = y * (Phi @ w) < 1.0
    g = -((sample_weight * y * active) @ Phi)
    g[1:] += lam * w[1:]
    return g


@njit(cache=True)
def _fill_map(z, out):
    d = z.shape[0]
    for i in range(d):
        out[i] = z[i]
    k = d
    for i in range(d):
        zi = z[i]
        for j in range(i, d):
            out[k] = zi * z[j]
            k += 1


@njit(cache=True)
def _hinge_sum(w, Z, y, sw):
    phi = np.empty(w.shape[0] - 1)
    total = 0.0
    for i in range(Z.shape[0]):
        _fill_map(Z[i], phi)
        m = w[0]
        for k in range(phi.shape[0]):
            m += w[k + 1] * phi[k]
        m = 1.0 - y[i] * m
        if m > 0.0:
            total += sw[i] * m
    return total


def _objective_fast(w, Z, y, sw, lam) -> float:
    return 0.5 * lam * float(w[1:] @ w[1:]) + float(_hinge_sum(w, Z, y, sw))


@njit(cache=True)
def _map_scores(v, Z):
    """``<v, phi(z_i)>`` without the bias, for every row."""
    phi = np.empty(v.shape[0])
    out = np.empty(Z.shape[0])
    for i in range(Z.shape[0]):
        _fill_map(Z[i], phi)
        s = 0.0
        for k in range(phi.shape[0]):
            s += v[k] * phi[k]
        out[i] = s
    return out


def optimal_bias(scores: np.ndarray, y: np.ndarray, sw: np.ndarray) -> float:
    """Exact minimizer over ``b`` of ``sum_i sw_i * max(0, 1 - y_i (s_i + b))``.

    The loss is convex and piecewise linear in ``b`` with a kink at
    ``y_i - s_i`` per sample, where its slope rises by ``sw_i``. The minimum
    sits at the first kink where the slope turns nonnegative; when the slope
    there is exactly zero the whole segment up to the next kink is optimal
    and its midpoint is returned.
    """
    kinks = np.sort(y - scores, kind="mergesort")
    order = np.argsort(y - scores, kind="mergesort")
    slope = -float(sw[y > 0].sum()) + np.cumsum(sw[order])
    tol = 1e-12 * float(sw.sum())
    idx = min(int(np.searchsorted(slope, -tol, side="left")), kinks.size - 1)
    if abs(slope[idx]) <= tol and idx + 1 < kinks.size:
        return float(0.5 * (kinks[idx] + kinks[idx + 1]))
    return float(kinks[idx])


@njit(cache=True)
def _sgd_epoch(Z, y, mult, draws, v, state, lam, radius, t0=0.0):
    """One pass of weighted Pegasos steps; returns the sum of the non-bias iterates.

    ``state`` holds ``[a, b, t, |v|^2]``; non-bias weights are ``a * v`` and the
    bias ``b`` stays fixed during the pass.
    """
    a, b, t, vv = state[0], state[1], state[2], state[3]
    d = v.shape[0]
    phi = np.empty(d)
    sum_v = np.zeros(d)
    pending = 0.0
    for r in range(draws.shape[0]):
        i = draws[r]
        t += 1.0
        _fill_map(Z[i], phi)
        dot = 0.0
        pp = 0.0
        for k in range(d):
            dot += v[k] * phi[k]
            pp += phi[k] * phi[k]
        margin = y[i] * (a * dot + b)
        te = t + t0
        eta = 1.0 / (lam * te)
        if te == 1.0:
            for k in range(d):
                v[k] = 0.0
            a, vv, dot = 1.0, 0.0, 0.0
        else:
            a *= 1.0 - 1.0 / te
        if margin < 1.0:
            coef = eta * mult[i]
            for k in range(d):
                sum_v[k] += pending * v[k]
            pending = 0.0
            if a < 1e-6:
                for k in range(d):
                    v[k] *= a
                vv *= a * a
                dot *= a
                a = 1.0
            c = coef / a
            for k in range(d):
                v[k] += c * phi[k]
            vv += 2.0 * c * dot + c * c * pp
        norm = a * np.sqrt(max(vv, 0.0))
        if norm > radius:
            for k in range(d):
                sum_v[k] += pending * v[k]
            pending = 0.0
            a *= radius / norm
        pending += a
    for k in range(d):
        sum_v[k] += pending * v[k]
    state[0], state[2], state[3] = a, t, vv
    return sum_v


def step_offset(lam: float) -> float:
    """``t0`` in the step size ``1 / (lam * (t + t0))``; caps the first step at 1 when ``lam < 1``."""
    return max(0.0, 1.0 / lam - 1.0)


def _check_training_data(X, y, sw):
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ValueError(f"expected (n, {N_FEATURES}) features, got shape {X.shape}")
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise ValueError(f"sample {int(bad[0])} has non-finite features")
    if not (np.isin(y, (-1.0, 1.0))).all():
        raise ValueError("labels must be +1 (allow) or -1 (deny)")
    if (y > 0).all() or (y < 0).all():
        raise ValueError("training needs both allow and deny samples")
    if (sw < 0).any() or not np.isfinite(sw).all():
        raise ValueError("sample weights must be finite and nonnegative")
    for cls in (1.0, -1.0):
        total = sw[y == cls].sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"sample weights of class {cls:+.0f} sum to {total}, expected 1")


def train(
    samples: FeatureTable | None = None,
    lam: float = 1e-3,
    seed: int = 0,
    epochs: int = DEFAULT_EPOCHS,
    *,
    X: np.ndarray | None = None,
    y: np.ndarray | None = None,
    sample_weight: np.ndarray | None = None,
) -> Model:
    """Fit the weighted hinge-loss SVM over the quadratic map.

    Each epoch runs Pegasos steps of size ``1/(lam (t + t0))`` on the non-bias
    weights with the bias held fixed; examples are drawn uniformly with
    replacement and each step scales its hinge subgradient by
    ``n * sample_weight``, an unbiased estimate of the weighted objective.
    At the epoch boundary the candidate is the mean of the epoch's iterates
    paired with its exactly optimal bias (see :func:`optimal_bias`), and the
    next epoch continues from that bias. A candidate replaces the current
    model only if it does not increase the full objective, so the returned
    model's objective is non-increasing across epochs (``objective_history``).
    """
    if samples is not None:
        X, y, sample_weight = samples.X, samples.y, samples.sample_weight
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sw = np.asarray(sample_weight, dtype=np.float64)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    _check_training_data(X, y, sw)

    std = Standardizer.fit(X, sw)
    Z = np.ascontiguousarray(std.transform(X))
    n = Z.shape[0]
    rng = np.random.default_rng(seed)
    mult = n * sw * y  # per-example multiplier of the hinge step
    radius = math.sqrt(2.0 * float(sw.sum()) / lam)  # |w*|^2 <= 2 J(0) / lam

    v = np.zeros(MAP_DIM - 1)
    state = np.zeros(4)
    state[0] = 1.0
    state[1] = optimal_bias(np.zeros(n), y, sw)
    best_w = np.zeros(MAP_DIM)
    best_obj = _objective_fast(best_w, Z, y, sw, lam)
    history = [best_obj]
    for epoch in range(epochs):
        draws = rng.integers(0, n, size=n)
        sum_v = _sgd_epoch(Z, y, mult, draws, v, state, lam, radius, step_offset(lam))
        avg = sum_v / n
        scores = _map_scores(avg, Z)
        b = optimal_bias(scores, y, sw)
        state[1] = b
        cand = np.concatenate(([b], avg))
        obj = 0.5 * lam * float(avg @ avg) + float(sw @ np.maximum(0.0, 1.0 - y * (scores + b)))
        log.debug("lambda=%g epoch=%d objective=%.6g (current %.6g)", lam, epoch + 1, obj, best_obj)
        if obj <= best_obj:
            best_w, best_obj = cand, obj
        history.append(best_obj)
    return Model(std, best_w, lam, 0.0, seed, FEATURE_ORDER_HASH, time.time(), history)


def select_lambda(
    train_set: FeatureTable,
    validation_set: FeatureTable,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    seed: int = 0,
    epochs: int = DEFAULT_EPOCHS,
) -> tuple[float, Model, dict]:
    """Train once per lambda; keep the best validation weighted AUC (ties go to larger lambda).

    Returns ``(lambda, model, {lambda: auc})``.
    """
    from .eval import weighted_roc_auc

    if not lambda_grid:
        raise ValueError("lambda grid is empty")
    best = None
    aucs = {}
    for lam in sorted(float(v) for v in lambda_grid):
        model = train(train_set, lam, seed, epochs)
        auc, _ = weighted_roc_auc(model.decision(validation_set.X), validation_set.label,
                                  validation_set.sample_weight)
        aucs[lam] = auc
        log.info("lambda=%g validation AUC=%.4f", lam, auc)
        if best is None or auc >= best[0] - AUC_TIE_TOL:
            best = (auc, lam, model)
    return best[1], best[2], aucs


# --- baseline ------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineModel:
    allowed: dict  # endpoint -> frozenset of remote IPs

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[tuple, int]]) -> "BaselineModel":
        table: dict = {}
        for endpoint, ip in pairs:
            table.setdefault((str(endpoint[0]), int(endpoint[1])), set()).add(int(ip))
        return cls({k: frozenset(v) for k, v in table.items()})

    def score_many(self, endpoints: Sequence[tuple], ips: Sequence[int]) -> np.ndarray:
        return np.array([baseline_score(self, e, ip) for e, ip in zip(endpoints, ips)], dtype=np.float64)


def baseline_fit(flows) -> BaselineModel:
    from .flow_model import as_frame

    frame = as_frame(flows)
    pairs = frame[["vm_id", "endpoint_port", "remote_ip"]].drop_duplicates()
    return BaselineModel.from_pairs(((vm, port), ip) for vm, port, ip in pairs.itertuples(index=False))


def baseline_score(model: BaselineModel, endpoint: tuple, remote_ip: int) -> float:
    seen = model.allowed.get((str(endpoint[0]), int(endpoint[1])))
    return 1.0 if seen is not None and int(remote_ip) in seen else 0.0


# --- persistence ---------------------------------------------------------------------

def model_to_json(model: Model) -> str:
    doc = {
        "version": MODEL_VERSION,
        "means": model.standardizer.means.tolist(),
        "stds": model.standardizer.std_devs.tolist(),
        "weights": model.weights.tolist(),
        "lambda": model.regularization,
        "threshold": model.threshold,
        "seed": model.seed,
        "feature_order_hash": model.feature_order_hash,
    }
    return json.dumps(doc)


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))
        fh.write("\n")


def load_model(path) -> Model:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFileError(f"{path}: corrupt model file ({exc})") from exc
    if not isinstance(doc, dict):
        raise ModelFileError(f"{path}: corrupt model file (not a JSON object)")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFileError(f"{path}: unsupported model version {doc.get('version')!r}")
    try:
        means = np.array(doc["means"], dtype=np.float64)
        stds = np.array(doc["stds"], dtype=np.float64)
        if means.shape != (N_FEATURES,) or stds.shape != (N_FEATURES,):
            raise ValueError("standardizer has wrong dimension")
        if doc["feature_order_hash"] != FEATURE_ORDER_HASH:
            raise ValueError("model was trained with a different feature order")
        return Model(
            Standardizer(means, stds),
            np.array(doc["weights"], dtype=np.float64),
            float(doc["lambda"]),
            float(doc["threshold"]),
            doc.get("seed"),
            doc["feature_order_hash"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: corrupt model file ({exc})") from exc
