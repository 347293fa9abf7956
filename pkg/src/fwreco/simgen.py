"""Seeded synthetic cloud traffic with expert-style firewall configs.

Benign clients live in small per-organization address neighborhoods and talk
to a few endpoints of their own organization during business hours. Scanners
sit anywhere else in the address space and send thin SYN probes to a large
share of all endpoints. A ``configured_fraction`` of endpoints gets an allow
list made of the neighborhoods of its benign clients; those endpoints are the
labeled ones.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import IO

import numpy as np
import pandas as pd

from .flow_model import FRAME_DTYPES, FirewallConfig, frame_to_csv, write_configs
from .grouping import PrefixSet

log = logging.getLogger(__name__)

SERVICE_PORTS = (22, 80, 443, 1433, 3306, 3389, 5432, 5671, 6379, 8080, 8443, 9200)
DEFAULT_START = 1704067200  # 2024-01-01T00:00:00Z
NEIGHBORHOOD_PREFIX = 24
ORG_PREFIX = 16


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_orgs: int = 50
    vms_per_org: int = 20
    endpoints_per_vm: int = 2
    n_benign_clients: int = 600_000
    n_scanners: int = 60
    days: int = 7
    sampling_ratio: float = 1.0
    configured_fraction: float = 0.05
    scanner_share_of_labeled_flows: float = 0.05
    deny_pair_fraction: float = 0.03
    start: int = DEFAULT_START

    def __post_init__(self):
        for name in ("n_orgs", "vms_per_org", "endpoints_per_vm", "days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_benign_clients < 0 or self.n_scanners < 0:
            raise ValueError("client and scanner counts must be >= 0")
        if self.endpoints_per_vm > len(SERVICE_PORTS):
            raise ValueError(f"endpoints_per_vm must be <= {len(SERVICE_PORTS)}")
        for name in ("sampling_ratio", "configured_fraction"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        for name in ("scanner_share_of_labeled_flows", "deny_pair_fraction"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    @property
    def n_endpoints(self) -> int:
        return self.n_orgs * self.vms_per_org * self.endpoints_per_vm

    @property
    def window(self) -> tuple[int, int]:
        return self.start, self.start + self.days * 86400

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    roles: pd.DataFrame  # remote_ip, role
    pair_labels: pd.DataFrame  # vm_id, endpoint_port, remote_ip, label (configured endpoints)

    def write(self, out: IO[str]) -> None:
        for ip, role in self.roles.itertuples(index=False):
            out.write(json.dumps({"remote_ip": int(ip), "role": role}) + "\n")
        for vm, port, ip, label in self.pair_labels.itertuples(index=False):
            out.write(json.dumps({"vm_id": vm, "endpoint_port": int(port), "remote_ip": int(ip),
                                  "label": label}) + "\n")

    @classmethod
    def read(cls, src) -> "GroundTruth":
        roles, pairs = [], []
        for line in src:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "role" in obj:
                roles.append((int(obj["remote_ip"]), obj["role"]))
            else:
                pairs.append((obj["vm_id"], int(obj["endpoint_port"]), int(obj["remote_ip"]), obj["label"]))
        return cls(pd.DataFrame(roles, columns=["remote_ip", "role"]),
                   pd.DataFrame(pairs, columns=["vm_id", "endpoint_port", "remote_ip", "label"]))


@dataclass
class SimOutput:
    config: SimConfig
    flows: pd.DataFrame  # columnar flow frame (see flow_model.FRAME_DTYPES)
    configs: list
    truth: GroundTruth

    def write(self, out_dir) -> dict:
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"flows": out_dir / "flows.csv", "configs": out_dir / "configs.jsonl",
                 "truth": out_dir / "truth.jsonl"}
        with open(paths["flows"], "w", encoding="utf-8", newline="") as fh:
            frame_to_csv(self.flows, fh)
        with open(paths["configs"], "w", encoding="utf-8") as fh:
            write_configs(self.configs, fh)
        with open(paths["truth"], "w", encoding="utf-8") as fh:
            self.truth.write(fh)
        return {k: str(v) for k, v in paths.items()}


def _org_blocks(rng: np.random.Generator, n_orgs: int) -> np.ndarray:
    # /16 regions inside 11.0.0.0 - 126.255.0.0, one per org
    candidates = np.arange(11 << 8, 127 << 8, dtype=np.int64)
    return np.sort(rng.choice(candidates, size=n_orgs, replace=False)) << 16


def _scanner_ips(rng, n, org_bases) -> np.ndarray:
    org_hi = set((org_bases >> 16).tolist())
    out: list[int] = []
    taken = set()
    while len(out) < n:
        draw = rng.integers(1 << 24, 224 << 24, size=2 * (n - len(out)) + 8, dtype=np.int64)
        for ip in draw.tolist():
            if (ip >> 16) in org_hi or ip in taken or (ip & 255) in (0, 255):
                continue
            taken.add(ip)
            out.append(ip)
            if len(out) == n:
                break
    return np.array(out, dtype=np.int64)


def _tcp_flags(rng, n, profile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw flag booleans from a categorical profile over (syn, reset, fin) combos."""
    combos, probs = zip(*profile)
    pick = rng.choice(len(combos), size=n, p=np.array(probs) / sum(probs))
    table = np.array(combos, dtype=bool)
    return table[pick, 0], table[pick, 1], table[pick, 2]


BENIGN_FLAGS_IN = [((1, 0, 0), 0.35), ((0, 0, 1), 0.25), ((1, 0, 1), 0.2), ((0, 0, 0), 0.17), ((0, 1, 0), 0.03)]
BENIGN_FLAGS_OUT = [((1, 0, 0), 0.3), ((0, 0, 1), 0.3), ((1, 0, 1), 0.15), ((0, 0, 0), 0.2), ((0, 1, 0), 0.05)]


def generate(config: SimConfig) -> SimOutput:
    """Generate flows, firewall configs and ground truth for ``config``."""
    rng = np.random.default_rng(config.seed)
    n_vms = config.n_orgs * config.vms_per_org
    n_ep = config.n_endpoints
    n_labeled = int(round(config.configured_fraction * n_ep))
    if n_labeled < 1:
        raise ValueError("configuration yields zero configured endpoints after rounding")

    # topology
    ep_vm = np.repeat(np.arange(n_vms), config.endpoints_per_vm)
    ep_org = ep_vm // config.vms_per_org
    ep_port = np.concatenate([
        np.sort(rng.choice(SERVICE_PORTS, size=config.endpoints_per_vm, replace=False)) for _ in range(n_vms)
    ]).astype(np.int64)
    org_ids = np.array([f"org{o:03d}" for o in range(config.n_orgs)], dtype=object)
    vm_ids = np.array([f"vm{v // config.vms_per_org:03d}-{v % config.vms_per_org:03d}" for v in range(n_vms)],
                      dtype=object)
    org_tz = rng.integers(0, 24, size=config.n_orgs)
    labeled = np.zeros(n_ep, dtype=bool)
    labeled[rng.choice(n_ep, size=n_labeled, replace=False)] = True

    # benign clients: one org each, addresses inside that org's neighborhoods
    org_bases = _org_blocks(rng, config.n_orgs)
    n_b = config.n_benign_clients
    client_org = rng.integers(0, config.n_orgs, size=n_b)
    per_org = np.bincount(client_org, minlength=config.n_orgs)
    client_ip = np.zeros(n_b, dtype=np.int64)
    client_hood = np.zeros(n_b, dtype=np.int64)
    for o in range(config.n_orgs):
        members = np.flatnonzero(client_org == o)
        if members.size == 0:
            continue
        n_hoods = min(256, max(1, math.ceil(members.size / 128)))
        hoods = np.sort(rng.choice(256, size=n_hoods, replace=False))
        slots = rng.choice(n_hoods * 254, size=members.size, replace=False)
        hood = hoods[slots // 254]
        client_hood[members] = org_bases[o] + (hood << 8)
        client_ip[members] = client_hood[members] + 1 + slots % 254

    # benign pairs: each client reaches 1 + Poisson(0.6) endpoints of its org
    eps_per_org = config.vms_per_org * config.endpoints_per_vm
    fanout = np.minimum(1 + rng.poisson(0.6, size=n_b), eps_per_org)
    offsets = _distinct_offsets(rng, fanout, eps_per_org)
    pair_client = np.repeat(np.arange(n_b), fanout)
    pair_ep = client_org[pair_client] * eps_per_org + offsets[np.arange(n_b).repeat(fanout),
                                                              _ranks(fanout)]

    # benign sessions: 1 + Poisson(0.5) per pair, each an inbound flow and maybe a reply
    sessions = 1 + rng.poisson(0.5, size=pair_client.size)
    s_pair = np.repeat(np.arange(pair_client.size), sessions)
    s_client = pair_client[s_pair]
    s_ep = pair_ep[s_pair]
    n_s = s_pair.size
    day = rng.integers(0, config.days, size=n_s)
    local_hour = rng.integers(8, 18, size=n_s)
    hour = (local_hour + org_tz[ep_org[s_ep]]) % 24
    ts = config.start + day * 86400 + hour * 3600 + rng.integers(0, 3600, size=n_s)
    tcp = rng.random(n_s) < 0.85
    src_port = rng.integers(1024, 65536, size=n_s)
    packets_in = np.maximum(1, np.rint(rng.lognormal(3.0, 1.0, size=n_s))).astype(np.int64)
    syn, rst, fin = _tcp_flags(rng, n_s, BENIGN_FLAGS_IN)
    benign_in = _flow_block(ts, s_ep, client_ip[s_client], src_port, True, tcp, syn, rst, fin, packets_in)
    reply = rng.random(n_s) < 0.5
    r_idx = np.flatnonzero(reply)
    syn_o, rst_o, fin_o = _tcp_flags(rng, r_idx.size, BENIGN_FLAGS_OUT)
    packets_out = np.maximum(1, np.rint(rng.lognormal(3.0, 1.0, size=r_idx.size))).astype(np.int64)
    benign_out = _flow_block(ts[r_idx] + rng.integers(0, 60, size=r_idx.size), s_ep[r_idx],
                             client_ip[s_client[r_idx]], src_port[r_idx], False, tcp[r_idx],
                             syn_o, rst_o, fin_o, packets_out)

    # scanners: coverage set so that deny pairs hit the target share of labeled pairs
    blocks = [benign_in, benign_out]
    scanner_ip = _scanner_ips(rng, config.n_scanners, org_bases)
    labeled_benign_pairs = int(labeled[pair_ep].sum())
    labeled_benign_flows = int((labeled[s_ep]).sum() + labeled[s_ep[r_idx]].sum())
    if config.n_scanners and labeled_benign_pairs:
        f = config.deny_pair_fraction
        want_pairs = f / (1 - f) * labeled_benign_pairs
        coverage = min(1.0, want_pairs / (config.n_scanners * n_labeled))
        sc_rows, sc_eps = np.nonzero(rng.random((config.n_scanners, n_ep)) < coverage)
        reply_p = 0.3
        share = config.scanner_share_of_labeled_flows
        want_flows = share / (1 - share) * labeled_benign_flows
        labeled_scan_pairs = max(1, int(labeled[sc_eps].sum()))
        probes_mean = max(1.0, want_flows / (labeled_scan_pairs * (1 + reply_p)))
        probes = 1 + rng.poisson(probes_mean - 1, size=sc_rows.size)
        p_pair = np.repeat(np.arange(sc_rows.size), probes)
        n_p = p_pair.size
        p_ep = sc_eps[p_pair]
        p_ip = scanner_ip[sc_rows[p_pair]]
        p_ts = config.start + rng.integers(0, config.days * 86400, size=n_p)
        p_src = rng.integers(1024, 65536, size=n_p)
        ones = np.ones(n_p, dtype=bool)
        zeros = np.zeros(n_p, dtype=bool)
        blocks.append(_flow_block(p_ts, p_ep, p_ip, p_src, True, ones, ones, zeros, zeros,
                                  rng.integers(1, 4, size=n_p)))
        rr = np.flatnonzero(rng.random(n_p) < reply_p)
        blocks.append(_flow_block(p_ts[rr], p_ep[rr], p_ip[rr], p_src[rr], False, ones[rr], zeros[rr],
                                  ones[rr], zeros[rr], np.ones(rr.size, dtype=np.int64)))
    elif config.n_scanners:
        log.warning("no benign pairs at configured endpoints; scanners not generated")

    raw = {k: np.concatenate([b[k] for b in blocks]) for k in blocks[0]}
    if config.sampling_ratio < 1.0:
        kept = rng.binomial(raw["packets"], config.sampling_ratio)
        keep = kept > 0
        raw = {k: v[keep] for k, v in raw.items()}
        raw["packets"] = kept[keep]
    raw["ts"] = np.minimum(raw["ts"], config.window[1] - 1)
    ep = raw.pop("ep")
    frame = pd.DataFrame({
        "timestamp": raw["ts"],
        "vm_id": vm_ids[ep_vm[ep]],
        "org_id": org_ids[ep_org[ep]],
        "endpoint_port": ep_port[ep],
        "remote_ip": raw["ip"],
        "remote_port": raw["src"],
        "inbound": raw["inbound"],
        "protocol": np.where(raw["tcp"], "tcp", "udp").astype(object),
        "syn": raw["syn"] & raw["tcp"],
        "reset": raw["reset"] & raw["tcp"],
        "fin": raw["fin"] & raw["tcp"],
        "packets": raw["packets"],
        "_ep": ep,
    })
    frame = frame.sort_values(["timestamp", "_ep", "remote_ip", "remote_port", "inbound"],
                              kind="mergesort").reset_index(drop=True)
    frame = frame.drop(columns="_ep").astype(FRAME_DTYPES)

    # expert configs: allow exactly the neighborhoods of each configured endpoint's clients
    configs = []
    on_labeled = labeled[pair_ep]
    hood_pairs = np.unique(np.column_stack([pair_ep[on_labeled], client_hood[pair_client[on_labeled]]]), axis=0)
    ep_hoods: dict[int, list] = {}
    for e, h in hood_pairs.tolist():
        ep_hoods.setdefault(e, []).append(h)
    for e in range(n_ep):
        endpoint = (vm_ids[ep_vm[e]], int(ep_port[e]))
        if labeled[e]:
            ranges = tuple(PrefixSet(h, NEIGHBORHOOD_PREFIX) for h in sorted(ep_hoods.get(e, ())))
            configs.append(FirewallConfig(endpoint, ranges, is_default=False))
        else:
            configs.append(FirewallConfig(endpoint, (), is_default=True))

    roles = pd.DataFrame({
        "remote_ip": np.concatenate([np.unique(client_ip), scanner_ip]),
        "role": ["benign"] * np.unique(client_ip).size + ["scanner"] * scanner_ip.size,
    })
    roles = roles.sort_values("remote_ip", kind="mergesort").reset_index(drop=True)
    truth = GroundTruth(roles, _pair_labels(frame, labeled, vm_ids[ep_vm], ep_port, roles))
    return SimOutput(config, frame, configs, truth)


def _ranks(counts: np.ndarray) -> np.ndarray:
    """0..k-1 for each group of size k, concatenated."""
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(counts.sum()) - starts


def _distinct_offsets(rng, counts: np.ndarray, upper: int) -> np.ndarray:
    """Per row, ``counts[i]`` distinct values in ``[0, upper)`` (columns beyond the count are filler)."""
    width = int(counts.max()) if counts.size else 0
    offs = rng.integers(0, upper, size=(counts.size, width))
    for j in range(1, width):
        while True:
            dup = (j < counts) & (offs[:, :j] == offs[:, j:j + 1]).any(axis=1)
            if not dup.any():
                break
            offs[dup, j] = rng.integers(0, upper, size=int(dup.sum()))
    return offs


def _flow_block(ts, ep, ip, src, inbound, tcp, syn, rst, fin, packets) -> dict:
    n = len(ts)
    return {
        "ts": np.asarray(ts, dtype=np.int64),
        "ep": np.asarray(ep, dtype=np.int64),
        "ip": np.asarray(ip, dtype=np.int64),
        "src": np.asarray(src, dtype=np.int64),
        "inbound": np.full(n, inbound, dtype=bool),
        "tcp": np.asarray(tcp, dtype=bool),
        "syn": np.asarray(syn, dtype=bool),
        "reset": np.asarray(rst, dtype=bool),
        "fin": np.asarray(fin, dtype=bool),
        "packets": np.asarray(packets, dtype=np.int64),
    }


def _pair_labels(frame, labeled, ep_vm_ids, ep_ports, roles) -> pd.DataFrame:
    keys = pd.DataFrame({"vm_id": ep_vm_ids[labeled], "endpoint_port": ep_ports[labeled]})
    pairs = frame[["vm_id", "endpoint_port", "remote_ip"]].drop_duplicates().merge(keys, how="inner")
    pairs = pairs.merge(roles, on="remote_ip", how="left")
    pairs["label"] = np.where(pairs["role"] == "scanner", "deny", "allow")
    return pairs.drop(columns="role").sort_values(["vm_id", "endpoint_port", "remote_ip"],
                                                  kind="mergesort").reset_index(drop=True)


@dataclass(frozen=True)
class SeparabilityReport:
    passed: bool | None
    scanner_median: float | None
    benign_median: float | None
    message: str


def verify_separability(truth: GroundTruth, features) -> SeparabilityReport:
    """Check that scanners reach more VMs cloud-wide than benign clients (medians).

    ``features`` is a :class:`~fwreco.features.FeatureTable`; the cloud-level
    share of VMs contacted is compared per remote IP.
    """
    from .features import ScopeLevel, feature_index

    col = feature_index(ScopeLevel.CLOUD, "vm_pct")
    per_ip = pd.DataFrame({"remote_ip": features.keys["remote_ip"].to_numpy(), "v": features.X[:, col]})
    per_ip = per_ip.drop_duplicates("remote_ip").merge(truth.roles, on="remote_ip", how="inner")
    scan = per_ip.loc[per_ip["role"] == "scanner", "v"]
    benign = per_ip.loc[per_ip["role"] == "benign", "v"]
    if scan.empty:
        return SeparabilityReport(None, None, float(benign.median()) if len(benign) else None,
                                  "no scanners in the featurized data; comparison skipped")
    if benign.empty:
        return SeparabilityReport(None, float(scan.median()), None,
                                  "no benign clients in the featurized data; comparison skipped")
    s_med, b_med = float(scan.median()), float(benign.median())
    ok = s_med > b_med
    msg = (f"median cloud-level VM share: scanners {s_med:.4g} vs benign {b_med:.4g} "
           + ("(scanners dominate)" if ok else "(DOMINANCE VIOLATED)"))
    return SeparabilityReport(ok, s_med, b_med, msg)
