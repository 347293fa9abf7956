"""Flow records, firewall configurations and label joining."""
from __future__ import annotations

import csv
import io
import ipaddress
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .grouping import PrefixSet

log = logging.getLogger(__name__)

FLOW_COLUMNS = [
    "timestamp",
    "vm_id",
    "org_id",
    "endpoint_port",
    "remote_ip",
    "remote_port",
    "direction",
    "protocol",
    "tcp_flags",
    "packets",
]
TCP_FLAGS = ("syn", "reset", "fin")

Endpoint = tuple  # (vm_id, endpoint_port)


class Direction(str, Enum):
    INBOUND = "inbound"
    OUTBOUND = "outbound"


class Protocol(str, Enum):
    TCP = "tcp"
    UDP = "udp"
    OTHER = "other"


class Label(str, Enum):
    ALLOW = "allow"
    DENY = "deny"


@dataclass(frozen=True)
class FlowRecord:
    timestamp: int
    vm_id: str
    org_id: str
    endpoint_port: int
    remote_ip: int
    remote_port: int
    direction: Direction
    protocol: Protocol
    tcp_flags: frozenset = frozenset()
    packets: int = 1

    def __post_init__(self):
        if not 0 <= self.endpoint_port <= 65535 or not 0 <= self.remote_port <= 65535:
            raise ValueError("ports must lie in 0..65535")
        if not 0 <= self.remote_ip < 2**32:
            raise ValueError(f"remote_ip {self.remote_ip} is not a 32-bit address")
        if self.packets < 1:
            raise ValueError(f"packets must be >= 1, got {self.packets}")
        unknown = set(self.tcp_flags) - set(TCP_FLAGS)
        if unknown:
            raise ValueError(f"unknown tcp flag(s): {sorted(unknown)}")
        if self.tcp_flags and self.protocol is not Protocol.TCP:
            raise ValueError("tcp_flags set on a non-TCP flow")

    @property
    def endpoint(self) -> Endpoint:
        return (self.vm_id, self.endpoint_port)

    def to_row(self) -> list:
        return [
            self.timestamp,
            self.vm_id,
            self.org_id,
            self.endpoint_port,
            str(ipaddress.IPv4Address(self.remote_ip)),
            self.remote_port,
            self.direction.value,
            self.protocol.value,
            "|".join(f for f in TCP_FLAGS if f in self.tcp_flags),
            self.packets,
        ]


@dataclass(frozen=True)
class FirewallConfig:
    endpoint: Endpoint
    allowed_ranges: tuple[PrefixSet, ...] = ()
    is_default: bool = True

    def __post_init__(self):
        if self.is_default and self.allowed_ranges:
            object.__setattr__(self, "allowed_ranges", ())

    def allows(self, ip: int) -> bool:
        return self.is_default or any(ip in r for r in self.allowed_ranges)

    def to_json(self) -> dict:
        return {
            "vm_id": self.endpoint[0],
            "endpoint_port": self.endpoint[1],
            "default": self.is_default,
            "allow": [r.cidr() for r in self.allowed_ranges],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FirewallConfig":
        is_default = bool(obj.get("default", False))
        ranges = () if is_default else tuple(PrefixSet.from_cidr(c) for c in obj.get("allow", []))
        return cls((str(obj["vm_id"]), int(obj["endpoint_port"])), ranges, is_default)


@dataclass(frozen=True, order=True)
class LabeledPair:
    endpoint: Endpoint
    remote_ip: int
    label: Label = field(compare=False)


class FlowParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class ParsedFlows(NamedTuple):
    records: list
    errors: list  # FlowParseError instances, skip mode only


def _parse_ip(token) -> int:
    token = str(token).strip()
    if "." in token:
        return int(ipaddress.IPv4Address(token))
    value = int(token)
    if not 0 <= value < 2**32:
        raise ValueError(f"remote_ip {token!r} outside the IPv4 range")
    return value


def _parse_flags(token) -> frozenset:
    token = (token or "").strip()
    return frozenset(f for f in token.split("|") if f) if token else frozenset()


def _record_from_fields(d: dict) -> FlowRecord:
    flags = d["tcp_flags"]
    if isinstance(flags, (list, tuple)):
        flags = frozenset(flags)
    else:
        flags = _parse_flags(flags)
    return FlowRecord(
        timestamp=int(d["timestamp"]),
        vm_id=str(d["vm_id"]),
        org_id=str(d["org_id"]),
        endpoint_port=int(d["endpoint_port"]),
        remote_ip=_parse_ip(d["remote_ip"]),
        remote_port=int(d["remote_port"]),
        direction=Direction(d["direction"]),
        protocol=Protocol(d["protocol"]),
        tcp_flags=flags,
        packets=int(d["packets"]),
    )


def _iter_lines(source) -> Iterator[str]:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    for raw in source:
        yield raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw


def parse_flows(source: IO | bytes, format: str = "csv", strict: bool = True) -> ParsedFlows:
    """Parse flow records from a csv or jsonl stream.

    In strict mode the first bad line raises :class:`FlowParseError`; otherwise
    bad lines are skipped and returned in ``errors`` with their line numbers.
    """
    records: list[FlowRecord] = []
    errors: list[FlowParseError] = []
    lines = _iter_lines(source)

    def fail(lineno: int, exc: Exception):
        err = FlowParseError(lineno, str(exc))
        if strict:
            raise err from exc
        errors.append(err)

    if format == "csv":
        header = None
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            row = next(csv.reader([line]))
            if header is None:
                header = [h.strip() for h in row]
                if header != FLOW_COLUMNS:
                    raise FlowParseError(lineno, f"unexpected header {header}")
                continue
            try:
                if len(row) != len(FLOW_COLUMNS):
                    raise ValueError(f"expected {len(FLOW_COLUMNS)} fields, got {len(row)}")
                records.append(_record_from_fields(dict(zip(header, row))))
            except (ValueError, KeyError) as exc:
                fail(lineno, exc)
    elif format == "jsonl":
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                records.append(_record_from_fields(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                fail(lineno, exc)
    else:
        raise ValueError(f"unknown flow format {format!r}")
    return ParsedFlows(records, errors)


def write_flows_csv(records: Iterable[FlowRecord], out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(FLOW_COLUMNS)
    for r in records:
        writer.writerow(r.to_row())


# --- columnar path -------------------------------------------------------------
# Bulk work (featurizing millions of flows) runs on a DataFrame with one column
# per field; flag sets become three boolean columns.

FRAME_DTYPES = {
    "timestamp": "int64",
    "vm_id": "object",
    "org_id": "object",
    "endpoint_port": "int64",
    "remote_ip": "int64",
    "remote_port": "int64",
    "inbound": "bool",
    "protocol": "object",
    "syn": "bool",
    "reset": "bool",
    "fin": "bool",
    "packets": "int64",
}


def records_to_frame(records: Sequence[FlowRecord]) -> pd.DataFrame:
    data = {
        "timestamp": [r.timestamp for r in records],
        "vm_id": [r.vm_id for r in records],
        "org_id": [r.org_id for r in records],
        "endpoint_port": [r.endpoint_port for r in records],
        "remote_ip": [r.remote_ip for r in records],
        "remote_port": [r.remote_port for r in records],
        "inbound": [r.direction is Direction.INBOUND for r in records],
        "protocol": [r.protocol.value for r in records],
        "syn": ["syn" in r.tcp_flags for r in records],
        "reset": ["reset" in r.tcp_flags for r in records],
        "fin": ["fin" in r.tcp_flags for r in records],
        "packets": [r.packets for r in records],
    }
    return pd.DataFrame(data).astype(FRAME_DTYPES)


def frame_to_records(frame: pd.DataFrame) -> list[FlowRecord]:
    out = []
    for row in frame.itertuples(index=False):
        flags = frozenset(f for f in TCP_FLAGS if getattr(row, f))
        out.append(
            FlowRecord(
                int(row.timestamp), row.vm_id, row.org_id, int(row.endpoint_port),
                int(row.remote_ip), int(row.remote_port),
                Direction.INBOUND if row.inbound else Direction.OUTBOUND,
                Protocol(row.protocol), flags, int(row.packets),
            )
        )
    return out


def _ip_column_to_int(col: pd.Series) -> pd.Series:
    if pd.api.types.is_integer_dtype(col):
        return col.astype("int64")
    text = col.astype(str)
    dotted = text.str.contains(".", regex=False)
    out = pd.Series(np.zeros(len(text), dtype=np.int64), index=text.index)
    if dotted.any():
        parts = text[dotted].str.split(".", expand=True)
        if parts.shape[1] != 4 or parts.isna().any().any():
            raise ValueError("malformed dotted-quad address")
        q = parts.astype("int64").to_numpy()
        if ((q < 0) | (q > 255)).any():
            raise ValueError("malformed dotted-quad address")
        out[dotted] = (q[:, 0] << 24) | (q[:, 1] << 16) | (q[:, 2] << 8) | q[:, 3]
    if (~dotted).any():
        out[~dotted] = text[~dotted].astype("int64")
    return out


def frame_to_csv(frame: pd.DataFrame, out) -> None:
    ips = frame["remote_ip"].to_numpy(dtype=np.int64)
    dotted = (
        pd.Series(ips >> 24).astype(str) + "." + pd.Series((ips >> 16) & 255).astype(str) + "."
        + pd.Series((ips >> 8) & 255).astype(str) + "." + pd.Series(ips & 255).astype(str)
    )
    code = sum(frame[name].to_numpy().astype(np.int64) << bit for bit, name in enumerate(TCP_FLAGS))
    combos = np.array(["|".join(f for bit, f in enumerate(TCP_FLAGS) if c >> bit & 1) for c in range(8)],
                      dtype=object)
    flags = combos[code]
    table = pd.DataFrame({
        "timestamp": frame["timestamp"].to_numpy(),
        "vm_id": frame["vm_id"].to_numpy(),
        "org_id": frame["org_id"].to_numpy(),
        "endpoint_port": frame["endpoint_port"].to_numpy(),
        "remote_ip": dotted.to_numpy(),
        "remote_port": frame["remote_port"].to_numpy(),
        "direction": np.where(frame["inbound"].to_numpy(), "inbound", "outbound"),
        "protocol": frame["protocol"].to_numpy(),
        "tcp_flags": flags,
        "packets": frame["packets"].to_numpy(),
    })
    table.to_csv(out, index=False, lineterminator="\n")


def read_flow_frame(path, format: str = "csv", strict: bool = True) -> tuple[pd.DataFrame, list]:
    """Load a flow file straight into columnar form.

    Clean csv files take a vectorized path; anything that fails validation
    there is re-read line by line so errors carry line numbers.
    """
    if format == "csv":
        try:
            raw = pd.read_csv(path, dtype={"vm_id": str, "org_id": str, "tcp_flags": str,
                                           "remote_ip": str}, keep_default_na=False)
            if list(raw.columns) != FLOW_COLUMNS:
                raise ValueError("header mismatch")
            return _validate_raw_frame(raw), []
        except (ValueError, TypeError, KeyError) as exc:
            log.debug("fast csv path rejected %s (%s); parsing line by line", path, exc)
    with open(path, "rb") as fh:
        parsed = parse_flows(fh, format=format, strict=strict)
    return records_to_frame(parsed.records), parsed.errors


def _validate_raw_frame(raw: pd.DataFrame) -> pd.DataFrame:
    if raw.empty:
        return records_to_frame([])
    flags = raw["tcp_flags"].astype(str)
    tokens = set()
    for combo in flags.unique():
        tokens.update(t for t in combo.split("|") if t)
    if tokens - set(TCP_FLAGS):
        raise ValueError("unknown tcp flag")
    direction = raw["direction"].astype(str)
    if not direction.isin(["inbound", "outbound"]).all():
        raise ValueError("unknown direction")
    protocol = raw["protocol"].astype(str)
    if not protocol.isin(["tcp", "udp", "other"]).all():
        raise ValueError("unknown protocol")
    frame = pd.DataFrame({
        "timestamp": raw["timestamp"].astype("int64"),
        "vm_id": raw["vm_id"].astype(str),
        "org_id": raw["org_id"].astype(str),
        "endpoint_port": raw["endpoint_port"].astype("int64"),
        "remote_ip": _ip_column_to_int(raw["remote_ip"]),
        "remote_port": raw["remote_port"].astype("int64"),
        "inbound": direction == "inbound",
        "protocol": protocol,
        "syn": flags.str.contains("syn", regex=False),
        "reset": flags.str.contains("reset", regex=False),
        "fin": flags.str.contains("fin", regex=False),
        "packets": raw["packets"].astype("int64"),
    })
    if (frame["packets"] < 1).any():
        raise ValueError("packets must be >= 1")
    for col in ("endpoint_port", "remote_port"):
        if ((frame[col] < 0) | (frame[col] > 65535)).any():
            raise ValueError(f"{col} out of range")
    if ((frame["remote_ip"] < 0) | (frame["remote_ip"] >= 2**32)).any():
        raise ValueError("remote_ip out of range")
    if ((frame["syn"] | frame["reset"] | frame["fin"]) & (frame["protocol"] != "tcp")).any():
        raise ValueError("tcp flags on non-TCP flow")
    return frame.astype(FRAME_DTYPES)


def as_frame(flows) -> pd.DataFrame:
    if isinstance(flows, pd.DataFrame):
        return flows
    return records_to_frame(list(flows))


# --- configs and labels ----------------------------------------------------------

def read_configs(source) -> list[FirewallConfig]:
    configs = []
    for lineno, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        try:
            configs.append(FirewallConfig.from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"config line {lineno}: {exc}") from exc
    return configs


def write_configs(configs: Iterable[FirewallConfig], out: IO[str]) -> None:
    for c in configs:
        out.write(json.dumps(c.to_json()) + "\n")


def index_configs(configs: Iterable[FirewallConfig]) -> dict:
    table = {}
    for c in configs:
        if c.endpoint in table:
            raise ValueError(f"duplicate firewall config for endpoint {c.endpoint}")
        table[c.endpoint] = c
    return table


def _allowed_mask(ips: np.ndarray, ranges: Sequence[PrefixSet]) -> np.ndarray:
    mask = np.zeros(ips.shape, dtype=bool)
    for r in ranges:
        mask |= (ips >= r.base) & (ips <= r.last)
    return mask


def label_pairs(flows, configs: Iterable[FirewallConfig]) -> list[LabeledPair]:
    """One labeled pair per distinct (configured endpoint, remote IP) seen in ``flows``.

    Endpoints with a default (allow-all) or missing config contribute nothing.
    Output is sorted by endpoint then address, independent of flow order.
    """
    table = index_configs(configs)
    frame = as_frame(flows)
    pairs = frame[["vm_id", "endpoint_port", "remote_ip"]].drop_duplicates()
    out = []
    for (vm, port), grp in pairs.groupby(["vm_id", "endpoint_port"], sort=True):
        cfg = table.get((vm, int(port)))
        if cfg is None or cfg.is_default:
            continue
        ips = np.sort(grp["remote_ip"].to_numpy(dtype=np.int64))
        allowed = _allowed_mask(ips, cfg.allowed_ranges)
        endpoint = (vm, int(port))
        out.extend(
            LabeledPair(endpoint, int(ip), Label.ALLOW if ok else Label.DENY)
            for ip, ok in zip(ips, allowed)
        )
    return out


def labeled_endpoint_fraction(flows, configs: Iterable[FirewallConfig]) -> float:
    """Share of endpoints seen in ``flows`` that carry a non-default config."""
    table = index_configs(configs)
    frame = as_frame(flows)
    endpoints = frame[["vm_id", "endpoint_port"]].drop_duplicates()
    if endpoints.empty:
        return 0.0
    labeled = sum(
        1 for vm, port in endpoints.itertuples(index=False)
        if (c := table.get((vm, int(port)))) is not None and not c.is_default
    )
    return labeled / len(endpoints)
