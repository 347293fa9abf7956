"""Per (endpoint, remote IP) traffic features at four scope levels.

Each pair gets 21 base features computed over four nested flow subsets that
all involve the remote IP: every flow in the dataset (``cloud``), flows with
the endpoint's organization, with its VM, and with the endpoint itself. The
vector is level-major: index ``level * 21 + row``.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .flow_model import LabeledPair, as_frame

HOUR = 3600
DAY = 86400
N_PORTS = 65536


class ScopeLevel(str, Enum):
    CLOUD = "cloud"
    ORGANIZATION = "organization"
    VM = "vm"
    ENDPOINT = "endpoint"


LEVELS = tuple(ScopeLevel)

BASE_FEATURES = (
    ("pct_inactive_hours", "% of inactive hours"),
    ("hourly_max_over_avg", "max over average of hourly # of packets"),
    ("hourly_avg", "average of hourly # of packets"),
    ("hourly_std", "std of hourly # of packets"),
    ("daily_max_over_avg", "max over average of daily # of packets"),
    ("daily_avg", "average of daily # of packets"),
    ("daily_std", "std of daily # of packets"),
    ("sent_tcp_pct", "% of TCP packets out of all packets sent"),
    ("sent_syn_pct", "% of SYN TCP packets out of all packets sent"),
    ("sent_reset_pct", "% of RESET TCP packets out of all packets sent"),
    ("sent_fin_pct", "% of FIN TCP packets out of all packets sent"),
    ("recv_tcp_pct", "% of TCP packets out of all packets received"),
    ("recv_syn_pct", "% of SYN TCP packets out of all packets received"),
    ("recv_reset_pct", "% of RESET TCP packets out of all packets received"),
    ("recv_fin_pct", "% of FIN TCP packets out of all packets received"),
    ("vm_pct", "% of VMs the IP communicates with"),
    ("vms_per_packet", "# VMs the IP communicates with / # IP packets observed"),
    ("src_port_pct", "% of ports the IP uses, out of # of possible ports"),
    ("dst_port_pct", "% of ports the IP communicates to out of # of possible ports"),
    ("src_ports_per_packet", "# ports the IP uses / # IP packets observed"),
    ("dst_ports_per_packet", "# ports the IP communicates with / # IP packets observed"),
)
N_BASE = len(BASE_FEATURES)
N_FEATURES = N_BASE * len(LEVELS)

FEATURE_NAMES = tuple(f"{lvl.value}.{name}" for lvl in LEVELS for name, _ in BASE_FEATURES)
FEATURE_COLUMNS = tuple(f"f{i:03d}" for i in range(N_FEATURES))
FEATURE_ORDER_HASH = hashlib.sha256("\n".join(FEATURE_NAMES).encode()).hexdigest()

# "sent"/"received" are from the remote IP's side: inbound flows carry what it sent.
_DIRECTIONS = (("sent", True), ("recv", False))


def feature_index(level: ScopeLevel | str, name: str) -> int:
    level = ScopeLevel(level)
    row = [n for n, _ in BASE_FEATURES].index(name)
    return LEVELS.index(level) * N_BASE + row


def level_of(index: int) -> ScopeLevel:
    return LEVELS[index // N_BASE]


def feature_order_table() -> pd.DataFrame:
    return pd.DataFrame(
        {
            "index": range(N_FEATURES),
            "column": FEATURE_COLUMNS,
            "level": [lvl.value for lvl in LEVELS for _ in BASE_FEATURES],
            "feature": [name for _ in LEVELS for name, _ in BASE_FEATURES],
            "description": [desc for _ in LEVELS for _, desc in BASE_FEATURES],
        }
    )


@dataclass(frozen=True)
class FeatureVector:
    endpoint: tuple
    remote_ip: int
    base_features: tuple
    label: str | None = None
    importance: float = 0.0
    sample_weight: float = 0.0


@dataclass
class FeatureTable:
    """Columnar feature matrix: one row per (endpoint, remote IP) pair."""

    keys: pd.DataFrame  # vm_id, endpoint_port, remote_ip
    X: np.ndarray
    label: np.ndarray  # object: "allow" / "deny" / None
    importance: np.ndarray
    sample_weight: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def endpoints(self) -> list[tuple]:
        return list(zip(self.keys["vm_id"], self.keys["endpoint_port"].astype(int)))

    def vectors(self) -> list[FeatureVector]:
        return [
            FeatureVector(
                (vm, int(port)), int(ip), tuple(self.X[i].tolist()), self.label[i],
                float(self.importance[i]), float(self.sample_weight[i]),
            )
            for i, (vm, port, ip) in enumerate(self.keys.itertuples(index=False))
        ]

    def subset(self, rows) -> "FeatureTable":
        rows = np.asarray(rows)
        return FeatureTable(
            self.keys.iloc[rows].reset_index(drop=True), self.X[rows], self.label[rows],
            self.importance[rows], self.sample_weight[rows],
        )

    def labeled(self) -> "FeatureTable":
        return self.subset(np.flatnonzero(pd.notna(self.label)))

    @property
    def y(self) -> np.ndarray:
        """+1 for allow, -1 for deny."""
        return np.where(self.label == "allow", 1.0, -1.0)

    def attach_labels(self, pairs: Iterable[LabeledPair]) -> "FeatureTable":
        """Set labels from ``pairs`` and recompute class-normalized sample weights."""
        lookup = {(p.endpoint[0], p.endpoint[1], p.remote_ip): p.label.value for p in pairs}
        label = np.array(
            [lookup.get((vm, int(port), int(ip))) for vm, port, ip in self.keys.itertuples(index=False)],
            dtype=object,
        )
        out = FeatureTable(self.keys, self.X, label, self.importance, np.zeros(len(self)))
        has = pd.notna(label)
        if has.any():
            w = class_normalized_weights(zip(self.importance[has], label[has]))
            out.sample_weight[has] = w
        return out

    def to_csv(self, out) -> None:
        ips = self.keys["remote_ip"].to_numpy(dtype=np.int64)
        head = pd.DataFrame(
            {
                "vm_id": self.keys["vm_id"].to_numpy(),
                "endpoint_port": self.keys["endpoint_port"].to_numpy(),
                "remote_ip": ips,
                "label": [lbl if lbl is not None else "" for lbl in self.label],
                "importance": self.importance,
                "sample_weight": self.sample_weight,
            }
        )
        body = pd.DataFrame(self.X, columns=list(FEATURE_COLUMNS))
        pd.concat([head, body], axis=1).to_csv(out, index=False, lineterminator="\n",
                                               float_format="%.17g")

    @classmethod
    def from_csv(cls, src) -> "FeatureTable":
        df = pd.read_csv(src, dtype={"vm_id": str, "label": str}, keep_default_na=False)
        missing = [c for c in ("vm_id", "endpoint_port", "remote_ip", "label", "importance",
                               "sample_weight", *FEATURE_COLUMNS) if c not in df.columns]
        if missing:
            raise ValueError(f"feature matrix is missing columns {missing[:5]}")
        label = np.array([v if v else None for v in df["label"]], dtype=object)
        bad = set(v for v in label if v is not None) - {"allow", "deny"}
        if bad:
            raise ValueError(f"unknown labels {sorted(bad)}")
        keys = df[["vm_id", "endpoint_port", "remote_ip"]].astype(
            {"endpoint_port": "int64", "remote_ip": "int64"}).reset_index(drop=True)
        return cls(
            keys,
            df[list(FEATURE_COLUMNS)].to_numpy(dtype=np.float64),
            label,
            df["importance"].to_numpy(dtype=np.float64),
            df["sample_weight"].to_numpy(dtype=np.float64),
        )


def _buckets(window: tuple[int, int], size: int) -> tuple[int, int]:
    start, end = window
    first = start // size
    last = (end - 1) // size
    return first, last - first + 1


def _check_window(window) -> tuple[int, int]:
    start, end = int(window[0]), int(window[1])
    if end <= start:
        raise ValueError(f"observation window end ({end}) must be after start ({start})")
    if end - start < HOUR:
        raise ValueError("observation window must span at least one full hour")
    return start, end


def _coded(frame: pd.DataFrame) -> pd.DataFrame:
    """Integer-coded working copy with per-direction packet columns."""
    f = pd.DataFrame(
        {
            "ip": frame["remote_ip"].to_numpy(dtype=np.int64),
            "org": pd.factorize(frame["org_id"], sort=True)[0],
            "vm": pd.factorize(frame["vm_id"], sort=True)[0],
            "eport": frame["endpoint_port"].to_numpy(dtype=np.int64),
            "rport": frame["remote_port"].to_numpy(dtype=np.int64),
            "ts": frame["timestamp"].to_numpy(dtype=np.int64),
            "packets": frame["packets"].to_numpy(dtype=np.int64),
        }
    )
    packets = f["packets"].to_numpy()
    tcp = (frame["protocol"] == "tcp").to_numpy()
    inbound = frame["inbound"].to_numpy()
    for side, mask in _DIRECTIONS:
        on_side = inbound if mask else ~inbound
        f[f"{side}_total"] = packets * on_side
        f[f"{side}_tcp"] = packets * (on_side & tcp)
        for flag in ("syn", "reset", "fin"):
            f[f"{side}_{flag}"] = packets * (on_side & frame[flag].to_numpy())
    return f


_LEVEL_KEYS = {
    ScopeLevel.CLOUD: ["ip"],
    ScopeLevel.ORGANIZATION: ["ip", "org"],
    ScopeLevel.VM: ["ip", "vm"],
    ScopeLevel.ENDPOINT: ["ip", "vm", "eport"],
}


def _bucket_stats(f: pd.DataFrame, keys: list[str], bucket: np.ndarray, prefix: str) -> pd.DataFrame:
    per_bucket = (
        f[keys].assign(_b=bucket, packets=f["packets"]).groupby(keys + ["_b"], sort=False)["packets"].sum()
    )
    sq = per_bucket.astype(np.int64) ** 2
    grouped = per_bucket.groupby(level=keys, sort=False)
    return pd.DataFrame(
        {
            f"{prefix}_active": grouped.size(),
            f"{prefix}_max": grouped.max(),
            f"{prefix}_sumsq": sq.groupby(level=keys, sort=False).sum(),
        }
    )


def _level_stats(f: pd.DataFrame, level: ScopeLevel, hour: np.ndarray, day: np.ndarray) -> pd.DataFrame:
    keys = _LEVEL_KEYS[level]
    sum_cols = ["packets"] + [c for c in f.columns if c.startswith(("sent_", "recv_"))]
    g = f.groupby(keys, sort=False)
    stats = g[sum_cols].sum()
    stats["n_vms"] = g["vm"].nunique()
    stats["n_src_ports"] = g["rport"].nunique()
    stats["n_dst_ports"] = g["eport"].nunique()
    stats = stats.join(_bucket_stats(f, keys, hour, "h")).join(_bucket_stats(f, keys, day, "d"))
    return stats


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.broadcast_to(np.asarray(den, dtype=np.float64), num.shape)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _distribution(s: pd.DataFrame, prefix: str, n_buckets: int) -> list[np.ndarray]:
    total = s["packets"].to_numpy(dtype=np.int64)
    avg = total / n_buckets
    var_num = n_buckets * s[f"{prefix}_sumsq"].to_numpy(dtype=np.int64) - total * total
    std = np.sqrt(np.maximum(var_num, 0).astype(np.float64)) / n_buckets
    return [_safe_div(s[f"{prefix}_max"].to_numpy(), avg), avg, std]


def _level_features(s: pd.DataFrame, n_hours: int, n_days: int, vm_universe: np.ndarray) -> np.ndarray:
    total = s["packets"].to_numpy(dtype=np.float64)
    cols = [(n_hours - s["h_active"].to_numpy()) / n_hours]
    cols += _distribution(s, "h", n_hours)
    cols += _distribution(s, "d", n_days)
    for side, _ in _DIRECTIONS:
        denom = s[f"{side}_total"].to_numpy()
        for kind in ("tcp", "syn", "reset", "fin"):
            cols.append(_safe_div(s[f"{side}_{kind}"].to_numpy(), denom))
    n_vms = s["n_vms"].to_numpy(dtype=np.float64)
    n_src = s["n_src_ports"].to_numpy(dtype=np.float64)
    n_dst = s["n_dst_ports"].to_numpy(dtype=np.float64)
    cols += [
        _safe_div(n_vms, vm_universe),
        _safe_div(n_vms, total),
        n_src / N_PORTS,
        n_dst / N_PORTS,
        _safe_div(n_src, total),
        _safe_div(n_dst, total),
    ]
    return np.column_stack(cols)


def _target_pairs(f: pd.DataFrame, frame: pd.DataFrame, endpoints) -> pd.DataFrame:
    pairs = pd.DataFrame(
        {
            "vm_id": frame["vm_id"].to_numpy(),
            "endpoint_port": frame["endpoint_port"].to_numpy(dtype=np.int64),
            "remote_ip": f["ip"].to_numpy(),
            "org": f["org"].to_numpy(),
            "vm": f["vm"].to_numpy(),
        }
    ).drop_duplicates(["vm_id", "endpoint_port", "remote_ip"])
    if endpoints is not None:
        wanted = pd.MultiIndex.from_tuples([(str(v), int(p)) for v, p in endpoints],
                                           names=["vm_id", "endpoint_port"])
        idx = pd.MultiIndex.from_frame(pairs[["vm_id", "endpoint_port"]])
        pairs = pairs[idx.isin(wanted)]
    return pairs.sort_values(["vm_id", "endpoint_port", "remote_ip"], kind="mergesort").reset_index(drop=True)


def _prepare(flows, window):
    start, end = _check_window(window)
    frame = as_frame(flows)
    if frame.empty:
        return frame, None, start, end
    ts = frame["timestamp"].to_numpy(dtype=np.int64)
    outside = (ts < start) | (ts >= end)
    if outside.any():
        raise ValueError(f"{int(outside.sum())} flow(s) fall outside the observation window [{start}, {end})")
    return frame, _coded(frame), start, end


def _scoped_stats(f, targets, start, end):
    h0, n_hours = _buckets((start, end), HOUR)
    d0, n_days = _buckets((start, end), DAY)
    relevant = f[f["ip"].isin(np.unique(targets["remote_ip"].to_numpy()))]
    hour = relevant["ts"].to_numpy() // HOUR - h0
    day = relevant["ts"].to_numpy() // DAY - d0
    probe = targets.rename(columns={"remote_ip": "ip", "endpoint_port": "eport"})
    out = {}
    for level in LEVELS:
        keys = _LEVEL_KEYS[level]
        stats = _level_stats(relevant, level, hour, day)
        out[level] = probe[keys].merge(stats, left_on=keys, right_index=True, how="left")
    return out, n_hours, n_days


def extract_features(flows, observation_window: tuple[int, int], endpoints=None) -> FeatureTable:
    """Unlabeled, unweighted feature rows for every (endpoint, remote IP) pair with flows.

    ``endpoints`` restricts the output rows (not the flows the scopes are
    computed over) to the given ``(vm_id, port)`` endpoints.
    """
    frame, f, start, end = _prepare(flows, observation_window)
    if f is None:
        empty = pd.DataFrame({"vm_id": pd.Series(dtype=object), "endpoint_port": pd.Series(dtype="int64"),
                              "remote_ip": pd.Series(dtype="int64")})
        return FeatureTable(empty, np.zeros((0, N_FEATURES)), np.zeros(0, dtype=object),
                            np.zeros(0), np.zeros(0))
    targets = _target_pairs(f, frame, endpoints)
    scoped, n_hours, n_days = _scoped_stats(f, targets, start, end)

    n_vms_total = f["vm"].nunique()
    vms_per_org = f.groupby("org")["vm"].nunique()
    universe = {
        ScopeLevel.CLOUD: np.full(len(targets), n_vms_total),
        ScopeLevel.ORGANIZATION: vms_per_org.reindex(targets["org"]).to_numpy(),
        ScopeLevel.VM: np.ones(len(targets)),
        ScopeLevel.ENDPOINT: np.ones(len(targets)),
    }
    X = np.hstack([_level_features(scoped[lvl], n_hours, n_days, universe[lvl]) for lvl in LEVELS])

    keys = targets[["vm_id", "endpoint_port", "remote_ip"]].reset_index(drop=True)
    imp = _importance_frame(frame)
    importance = keys.merge(imp, on=["vm_id", "endpoint_port", "remote_ip"], how="left")["importance"]
    return FeatureTable(
        keys, X, np.full(len(keys), None, dtype=object), importance.to_numpy(dtype=np.float64),
        np.zeros(len(keys)),
    )


def scope_counts(flows, observation_window: tuple[int, int], endpoints=None) -> pd.DataFrame:
    """Raw breadth counts per pair and level: distinct VMs, remote ports, endpoint ports, packets."""
    frame, f, start, end = _prepare(flows, observation_window)
    if f is None:
        return pd.DataFrame()
    targets = _target_pairs(f, frame, endpoints)
    scoped, _, _ = _scoped_stats(f, targets, start, end)
    out = targets[["vm_id", "endpoint_port", "remote_ip"]].reset_index(drop=True).copy()
    for lvl in LEVELS:
        s = scoped[lvl].reset_index(drop=True)
        for col in ("n_vms", "n_src_ports", "n_dst_ports", "packets"):
            out[f"{lvl.value}.{col}"] = s[col].to_numpy()
    return out


def _importance_frame(frame: pd.DataFrame) -> pd.DataFrame:
    per_pair = frame.groupby(["vm_id", "endpoint_port", "remote_ip"], sort=True)["packets"].sum()
    per_endpoint = per_pair.groupby(level=["vm_id", "endpoint_port"]).transform("sum")
    return (per_pair / per_endpoint).rename("importance").reset_index()


def importance_weights(flows) -> dict:
    """Share of each endpoint's packets exchanged with each remote IP."""
    frame = as_frame(flows)
    if frame.empty:
        return {}
    imp = _importance_frame(frame)
    return {
        ((vm, int(port)), int(ip)): float(w)
        for vm, port, ip, w in imp.itertuples(index=False)
    }


def class_normalized_weights(pairs: Iterable[tuple[float, str]]) -> list[float]:
    """Divide each importance by the total importance of its class."""
    pairs = [(float(w), str(getattr(lbl, "value", lbl))) for w, lbl in pairs]
    totals: dict[str, float] = {}
    for w, lbl in pairs:
        if w < 0:
            raise ValueError(f"negative importance {w}")
        totals[lbl] = totals.get(lbl, 0.0) + w
    for lbl, total in totals.items():
        if total <= 0:
            raise ValueError(f"class {lbl!r} has zero total importance")
    return [w / totals[lbl] for w, lbl in pairs]


def write_feature_order(out) -> None:
    feature_order_table().to_csv(out, index=False, lineterminator="\n")
