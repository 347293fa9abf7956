"""Minimal-noise prefix covers of an authorized address set.

A *prefix set* is every address sharing a most-significant-bit prefix (a CIDR
block). A *cover* is a list of pairwise disjoint prefix sets containing every
authorized address; its noise is the number of unauthorized addresses it
admits. :func:`find_min_cover` solves the budgeted problem (at most ``L``
sets, each of at most ``S`` addresses) with a dynamic program over the sorted
addresses; :func:`brute_force_min_cover` is an exhaustive oracle for small
widths.
"""
from __future__ import annotations

import ipaddress
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PrefixSet",
    "Cover",
    "GroupingConstraints",
    "InfeasibleCover",
    "DPTables",
    "shared_prefix_set",
    "noise_of",
    "dp_tables",
    "find_min_cover",
    "covers_for_all_budgets",
    "brute_force_min_cover",
    "validate_cover",
    "parse_address",
    "format_prefix",
]

INF = np.inf


class InfeasibleCover(ValueError):
    """No cover satisfies the budget and size constraints."""

    def __init__(self, message: str = "impossible constraints"):
        super().__init__(message)


@dataclass(frozen=True, order=True)
class PrefixSet:
    base: int
    prefix_len: int
    width: int = 32

    def __post_init__(self):
        if not 1 <= self.width <= 32:
            raise ValueError(f"width must be in 1..32, got {self.width}")
        if not 0 <= self.prefix_len <= self.width:
            raise ValueError(f"prefix_len {self.prefix_len} outside 0..{self.width}")
        if not 0 <= self.base < (1 << self.width):
            raise ValueError(f"base {self.base} outside {self.width}-bit space")
        if self.base & (self.size - 1):
            raise ValueError(f"base {self.base} has bits set below /{self.prefix_len}")

    @classmethod
    def containing(cls, address: int, prefix_len: int, width: int = 32) -> "PrefixSet":
        host_bits = width - prefix_len
        return cls((address >> host_bits) << host_bits, prefix_len, width)

    @classmethod
    def from_cidr(cls, text: str) -> "PrefixSet":
        net = ipaddress.IPv4Network(text.strip(), strict=True)
        return cls(int(net.network_address), net.prefixlen, 32)

    @classmethod
    def from_prefix_notation(cls, text: str, width: int) -> "PrefixSet":
        """Parse ``"110*"`` (or a full bit string with no star)."""
        bits = text.strip()
        if bits.endswith("*"):
            bits = bits[:-1]
        elif len(bits) != width:
            raise ValueError(f"{text!r} is neither a full {width}-bit string nor ends in '*'")
        if len(bits) > width or set(bits) - {"0", "1"}:
            raise ValueError(f"bad prefix notation {text!r} for width {width}")
        value = int(bits, 2) if bits else 0
        return cls(value << (width - len(bits)), len(bits), width)

    @property
    def size(self) -> int:
        return 1 << (self.width - self.prefix_len)

    @property
    def last(self) -> int:
        return self.base + self.size - 1

    def __contains__(self, address: int) -> bool:
        return self.base <= address <= self.last

    def overlaps(self, other: "PrefixSet") -> bool:
        return self.base <= other.last and other.base <= self.last

    def prefix_notation(self) -> str:
        if self.prefix_len == 0:
            return "*"
        bits = format(self.base >> (self.width - self.prefix_len), f"0{self.prefix_len}b")
        return bits if self.prefix_len == self.width else bits + "*"

    def cidr(self) -> str:
        if self.width != 32:
            raise ValueError("CIDR notation is only defined for 32-bit prefix sets")
        return f"{ipaddress.IPv4Address(self.base)}/{self.prefix_len}"

    def __str__(self) -> str:
        return self.cidr() if self.width == 32 else self.prefix_notation()


@dataclass(frozen=True)
class Cover:
    sets: tuple[PrefixSet, ...]
    noise: int

    def __len__(self) -> int:
        return len(self.sets)

    def rules(self) -> list[str]:
        return [str(s) for s in self.sets]


@dataclass(frozen=True)
class GroupingConstraints:
    L: int = 200
    S: int = 4096

    def __post_init__(self):
        if self.L < 1 or self.S < 1:
            raise ValueError(f"L and S must be >= 1 (got L={self.L}, S={self.S})")

    @property
    def max_host_bits(self) -> int:
        """log2 of the largest power of two <= S."""
        return self.S.bit_length() - 1


def parse_address(token: str, width: int = 32) -> int:
    """Parse a dotted quad, a decimal integer or (for width < 32) a bit string."""
    token = token.strip()
    if width < 32 and len(token) == width and set(token) <= {"0", "1"}:
        value = int(token, 2)
    elif "." in token:
        value = int(ipaddress.IPv4Address(token))
    else:
        value = int(token)
    if not 0 <= value < (1 << width):
        raise ValueError(f"address {token!r} outside {width}-bit space")
    return value


def format_prefix(p: PrefixSet) -> str:
    return str(p)


def shared_prefix_set(p: int, q: int, width: int = 32) -> PrefixSet:
    """Prefix set generated by the longest common leading bits of ``p`` and ``q``."""
    differing = (p ^ q).bit_length()
    return PrefixSet.containing(p, width - differing, width)


def noise_of(prefix_set: PrefixSet, covered_count: int) -> int:
    if not 0 <= covered_count <= prefix_set.size:
        raise ValueError(f"covered_count {covered_count} exceeds set size {prefix_set.size}")
    return prefix_set.size - covered_count


def _prepare(authorized: Iterable[int], width: int) -> np.ndarray:
    points = np.unique(np.asarray(list(authorized), dtype=np.int64))
    if points.size and (points[0] < 0 or points[-1] >= (1 << width)):
        raise ValueError(f"authorized addresses must lie in 0..2^{width}-1")
    return points


@dataclass
class DPTables:
    """Filled tables for one instance.

    ``A[i, j]`` is the minimum segment-relative noise covering the first ``i``
    sorted addresses with at most ``j`` prefix sets; ``B[i, j]`` is the
    1-based index of the first address in the last set and ``C[i, j]`` that
    set's prefix length.
    """

    points: np.ndarray
    width: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @property
    def N(self) -> int:
        return int(self.points.size)

    @property
    def L(self) -> int:
        return self.A.shape[1] - 1

    def prefix_set(self, i: int, j: int) -> PrefixSet:
        return PrefixSet.containing(int(self.points[i - 1]), int(self.C[i, j]), self.width)

    def reconstruct(self, budget: int) -> Cover:
        if not 1 <= budget <= self.L:
            raise ValueError(f"budget must be in 1..{self.L}, got {budget}")
        if self.N == 0:
            return Cover((), 0)
        if not np.isfinite(self.A[self.N, budget]):
            raise InfeasibleCover()
        sets = []
        i, j = self.N, budget
        while i > 0:
            sets.append(self.prefix_set(i, j))
            i, j = int(self.B[i, j]) - 1, j - 1
        return Cover(tuple(reversed(sets)), int(self.A[self.N, budget]))


def dp_tables(authorized: Iterable[int], L: int, S: int, width: int = 32) -> DPTables:
    """Fill the cover tables for every prefix of the sorted addresses and every budget.

    The candidate cost of closing a set at address ``i`` that opens at ``k``
    is ``|I| - (i - k + 1) + A[k-1, j-1]`` where ``I`` is the shared prefix
    set of ``k`` and ``i``. ``I`` takes one of at most ``log2(S) + 1``
    values, so instead of scanning every admissible ``k`` we keep, per prefix
    length, a running minimum of ``k + A[k-1, j-1]`` over the block of ``i``
    at that length. Reading a block that is larger than the true shared set
    only overestimates, so the minimum is unchanged, and the per-address work
    no longer depends on how many addresses share a block. Among equal
    candidates the smallest ``k`` (largest set) wins.
    """
    limits = GroupingConstraints(L, S)
    points = _prepare(authorized, width)
    n = points.size
    host_bits = min(limits.max_host_bits, width)

    A = np.full((n + 1, L + 1), INF)
    A[0, :] = 0.0
    B = np.zeros((n + 1, L + 1), dtype=np.int64)
    C = np.full((n + 1, L + 1), -1, dtype=np.int8)
    if n == 0:
        return DPTables(points, width, A, B, C)

    # row r tracks blocks of prefix length width - host_bits + r (size 2**(host_bits - r))
    n_levels = host_bits + 1
    sizes = np.array([2.0 ** (host_bits - r) for r in range(n_levels)])[:, None]
    run_min = np.full((n_levels, L), INF)
    run_arg = np.zeros((n_levels, L), dtype=np.int64)
    cols = np.arange(L)
    prev = None
    for i in range(1, n + 1):
        p_i = int(points[i - 1])
        v = i + A[i - 1, :-1]
        if prev is None or (prev ^ p_i) >> host_bits:
            first_new = 0
        else:
            first_new = host_bits - (prev ^ p_i).bit_length() + 1
        run_min[first_new:] = v
        run_arg[first_new:] = i
        if first_new:
            better = v < run_min[:first_new]
            run_min[:first_new] = np.where(better, v, run_min[:first_new])
            run_arg[:first_new] = np.where(better, i, run_arg[:first_new])
        prev = p_i

        cand = sizes - (i + 1) + run_min
        vals = cand.min(axis=0)
        ks = np.where(cand == vals, run_arg, n + 1).min(axis=0)
        finite = np.isfinite(vals)
        A[i, 1:] = vals
        B[i, 1:] = np.where(finite, ks, 0)
        k_addr = points[np.where(finite, ks, i) - 1]
        diff_bits = np.frexp((k_addr ^ p_i).astype(np.float64))[1]
        C[i, 1:] = np.where(finite, width - diff_bits, -1)
    return DPTables(points, width, A, B, C)


def find_min_cover(authorized: Iterable[int], L: int, S: int, width: int = 32) -> Cover:
    """Cover all authorized addresses with <= L disjoint prefix sets of size <= S.

    Raises :class:`InfeasibleCover` when no such cover exists.
    """
    return dp_tables(authorized, L, S, width).reconstruct(L)


def covers_for_all_budgets(
    authorized: Iterable[int], L: int, S: int, width: int = 32
) -> dict[int, Cover | None]:
    """Minimum covers for every budget 1..L from a single table fill.

    Infeasible budgets map to ``None``.
    """
    tables = dp_tables(authorized, L, S, width)
    out: dict[int, Cover | None] = {}
    for budget in range(1, L + 1):
        try:
            out[budget] = tables.reconstruct(budget)
        except InfeasibleCover:
            out[budget] = None
    return out


def min_noise_cover(authorized: Iterable[int], L: int, S: int, width: int = 32) -> Cover:
    """Cover with the least noise over budgets 1..L, using the fewest sets among ties.

    Same result as taking the best entry of :func:`covers_for_all_budgets`,
    but only one cover is reconstructed.
    """
    tables = dp_tables(authorized, L, S, width)
    if tables.N == 0:
        return Cover((), 0)
    row = tables.A[tables.N, 1:]
    if not np.isfinite(row).any():
        raise InfeasibleCover()
    return tables.reconstruct(int(np.argmin(row)) + 1)


def validate_cover(cover: Cover, authorized: Iterable[int], S: int | None = None,
                   L: int | None = None) -> None:
    """Raise ``AssertionError`` unless ``cover`` is disjoint, covering, bounded and its noise recounts."""
    points = sorted(set(int(p) for p in authorized))
    sets = sorted(cover.sets, key=lambda s: s.base)
    for a, b in zip(sets, sets[1:]):
        if a.overlaps(b):
            raise AssertionError(f"prefix sets {a} and {b} overlap")
    if L is not None and len(sets) > L:
        raise AssertionError(f"{len(sets)} prefix sets exceed budget {L}")
    if S is not None:
        for s in sets:
            if s.size > S:
                raise AssertionError(f"prefix set {s} has size {s.size} > {S}")
    bases = [s.base for s in sets]
    inside = 0
    for p in points:
        idx = int(np.searchsorted(bases, p, side="right")) - 1
        if idx < 0 or p not in sets[idx]:
            raise AssertionError(f"authorized address {p} is not covered")
        inside += 1
    noise = sum(s.size for s in sets) - inside
    if noise != cover.noise:
        raise AssertionError(f"reported noise {cover.noise} != recount {noise}")


def _candidate_sets(p: int, host_limit: int, width: int) -> list[PrefixSet]:
    return [PrefixSet.containing(p, width - h, width) for h in range(min(host_limit, width) + 1)]


def brute_force_min_cover(authorized: Sequence[int], L: int, S: int, width: int) -> Cover:
    """Exhaustive search over covers built from prefix sets of size <= S.

    Any optimal cover can drop sets holding no authorized address, so every
    set is chosen as one of the prefix sets containing the lowest still
    uncovered address. Noise is counted directly as ``|union \\ W|``.
    """
    if width > 10:
        raise ValueError(f"brute force is limited to width <= 10, got {width}")
    limits = GroupingConstraints(L, S)
    W = sorted(set(int(p) for p in authorized))
    if any(not 0 <= p < (1 << width) for p in W):
        raise ValueError(f"authorized addresses must lie in 0..2^{width}-1")
    if not W:
        return Cover((), 0)
    Wset = set(W)
    best: list = [None, None]

    def search(chosen: list[PrefixSet], remaining: list[int]):
        if not remaining:
            union = set()
            for s in chosen:
                union.update(range(s.base, s.last + 1))
            noise = len(union - Wset)
            if best[0] is None or noise < best[0]:
                best[0], best[1] = noise, tuple(chosen)
            return
        if len(chosen) == limits.L:
            return
        first = remaining[0]
        for cand in _candidate_sets(first, limits.max_host_bits, width):
            if any(cand.overlaps(c) for c in chosen):
                continue
            chosen.append(cand)
            search(chosen, [p for p in remaining if p not in cand])
            chosen.pop()

    search([], W)
    if best[0] is None:
        raise InfeasibleCover()
    return Cover(best[1], best[0])
