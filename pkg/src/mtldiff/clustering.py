"""Optimal contiguous partition of timesteps into size-bounded intervals.

Timesteps {1, ..., T} are split into k contiguous intervals minimising the
sum of per-interval costs, each cost measured against the interval's center
timestep.  The exact optimum comes from a dynamic program over (prefix
length, interval count) with a size window per transition; cost ties are
broken toward balanced interval sizes, then toward the smallest left
boundary, so the result is a deterministic function of the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import FormatError, InfeasibleClusteringError, VersionError

CLUSTERS_MAGIC = "MTLDIFF-CLUSTERS"
CLUSTERS_VERSION = "v1"
_CLUSTERS_COLUMNS = "index,l,r,size,segment_cost"
COST_KINDS = ("timestep", "snr", "gradient")


def default_bounds(T: int, k: int) -> tuple[int, int]:
    """Default interval-size window: floor(T/2k) (at least 1) to ceil(3T/2k)."""
    if k < 1 or T < k:
        raise ValueError(f"need 1 <= k <= T, got k={k}, T={T}")
    return max(1, T // (2 * k)), math.ceil(3 * T / (2 * k))


class SegmentCost:
    """Cost of a contiguous timestep segment, measured against its center.

    Three variants share the interface: ``timestep`` sums |t_c - t|, ``snr``
    sums |log SNR(t_c) - log SNR(t)|, and ``gradient`` sums the negated rows
    of a T x T pairwise-affinity matrix (high affinity to the center makes a
    segment cheap).  The center of [l, r] is floor((l + r) / 2).
    """

    def __init__(self, kind: str, T: int, values: np.ndarray | None = None,
                 matrix: np.ndarray | None = None):
        if kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {kind!r}")
        if T < 1:
            raise ValueError(f"need T >= 1, got {T}")
        self.kind = kind
        self.T = T
        if kind == "gradient":
            matrix = np.ascontiguousarray(matrix, dtype=np.float64)
            if matrix.shape != (T, T):
                raise ValueError(f"affinity matrix must be ({T}, {T}), got {matrix.shape}")
            # P[r, t] = sum of row r-1 over columns 1..t, both axes padded by one
            P = np.zeros((T + 1, T + 1))
            np.cumsum(matrix, axis=1, out=P[1:, 1:])
            self._P = P
            self._v = None
            self._cs = None
        else:
            values = np.ascontiguousarray(values, dtype=np.float64)
            if values.shape != (T,):
                raise ValueError(f"per-timestep values must have shape ({T},)")
            if not (np.all(np.diff(values) > 0) or np.all(np.diff(values) < 0)):
                raise ValueError("per-timestep values must be strictly monotone")
            v = np.zeros(T + 1)
            v[1:] = values
            cs = np.zeros(T + 1)
            np.cumsum(values, out=cs[1:])
            self._v = v
            self._cs = cs
            self._P = None

    @classmethod
    def timestep(cls, T: int) -> "SegmentCost":
        """Sum of |center - t| over the segment."""
        return cls("timestep", T, values=np.arange(1, T + 1, dtype=np.float64))

    @classmethod
    def snr(cls, schedule) -> "SegmentCost":
        """Sum of |log SNR(center) - log SNR(t)| over the segment."""
        return cls("snr", schedule.T, values=schedule.log_snr_all())

    @classmethod
    def gradient(cls, matrix: np.ndarray) -> "SegmentCost":
        """Negated sum of affinity between the center row and the segment."""
        matrix = np.asarray(matrix)
        return cls("gradient", matrix.shape[0], matrix=matrix)

    @staticmethod
    def center(l: int, r: int) -> int:
        return (l + r) // 2

    def _check_segment(self, l: int, r: int):
        if not (1 <= l <= r <= self.T):
            raise ValueError(f"need 1 <= l <= r <= {self.T}, got [{l}, {r}]")

    def segment_cost(self, l: int, r: int) -> float:
        """Exact cost of the segment [l, r]."""
        self._check_segment(l, r)
        c = (l + r) // 2
        if self.kind == "gradient":
            return float(-(self._P[c, r] - self._P[c, l - 1]))
        left = (c - l + 1) * self._v[c] - (self._cs[c] - self._cs[l - 1])
        right = (self._cs[r] - self._cs[c]) - (r - c) * self._v[c]
        return float(abs(left) + abs(right))


@dataclass(frozen=True)
class IntervalClustering:
    """A contiguous partition of {1, ..., T} into k ordered intervals."""

    k: int
    bounds: tuple[tuple[int, int], ...]
    total_cost: float

    def __post_init__(self):
        bounds = tuple((int(l), int(r)) for l, r in self.bounds)
        object.__setattr__(self, "bounds", bounds)
        if self.k < 1 or len(bounds) != self.k:
            raise ValueError(f"expected {self.k} intervals, got {len(bounds)}")
        if bounds[0][0] != 1:
            raise ValueError(f"first interval must start at 1, got {bounds[0]}")
        for (l, r), (l2, _) in zip(bounds, bounds[1:]):
            if r + 1 != l2:
                raise ValueError(f"intervals must be contiguous, got ...{(l, r)}, {(l2, _)}...")
        if any(l > r for l, r in bounds):
            raise ValueError(f"empty interval in {bounds}")

    @property
    def T(self) -> int:
        return self.bounds[-1][1]

    def sizes(self) -> tuple[int, ...]:
        return tuple(r - l + 1 for l, r in self.bounds)

    def assign(self, t):
        """1-based cluster index of timestep t (scalar or array)."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise IndexError(f"timestep out of range 1..{self.T}")
        rights = np.array([r for _, r in self.bounds])
        idx = np.searchsorted(rights, t_arr) + 1
        return idx if t_arr.ndim else int(idx)


def solve(cost: SegmentCost, k: int, min_size: int | None = None,
          max_size: int | None = None) -> IntervalClustering:
    """Minimum-total-cost partition of {1, ..., T} into k bounded intervals.

    Size bounds default to :func:`default_bounds`.  Raises
    ``InfeasibleClusteringError`` when no partition fits the bounds
    (``k * min_size <= T <= k * max_size`` is required).  Among equal-cost
    optima the most balanced partition (smallest sum of squared sizes) is
    returned, with ties beyond that broken toward smaller left boundaries.
    """
    T = cost.T
    d_lo, d_hi = default_bounds(T, k)
    m_lo = d_lo if min_size is None else int(min_size)
    m_hi = d_hi if max_size is None else int(max_size)
    if not (1 <= m_lo <= m_hi):
        raise ValueError(f"need 1 <= min_size <= max_size, got {m_lo}, {m_hi}")
    if k * m_lo > T or k * m_hi < T:
        raise InfeasibleClusteringError(
            f"no partition of T={T} into k={k} intervals with sizes in [{m_lo}, {m_hi}]"
        )
    D = np.full((T + 1, k + 1), np.inf)
    D2 = np.full((T + 1, k + 1), np.inf)
    D[0, 0] = 0.0
    D2[0, 0] = 0.0
    S = np.zeros((T + 1, k + 1), dtype=np.int64)
    ker = _backend.kernels()
    if cost.kind == "gradient":
        ker.dp_fill_rowsum(cost._P, T, k, m_lo, m_hi, D, D2, S)
    else:
        ker.dp_fill_absdev(cost._v, cost._cs, T, k, m_lo, m_hi, D, D2, S)
    if not np.isfinite(D[T, k]):
        raise InfeasibleClusteringError(
            f"no partition of T={T} into k={k} intervals with sizes in [{m_lo}, {m_hi}]"
        )
    bounds = []
    r = T
    for m in range(k, 0, -1):
        l = int(S[r, m])
        bounds.append((l, r))
        r = l - 1
    bounds.reverse()
    return IntervalClustering(k=k, bounds=tuple(bounds), total_cost=float(D[T, k]))


def write_clustering(path, clustering: IntervalClustering, cost: SegmentCost) -> None:
    """Write the cluster table: one row per interval plus a total trailer."""
    if cost.T != clustering.T:
        raise ValueError(f"cost is over T={cost.T} but clustering covers T={clustering.T}")
    lines = [f"{CLUSTERS_MAGIC} {CLUSTERS_VERSION}", _CLUSTERS_COLUMNS]
    for idx, (l, r) in enumerate(clustering.bounds, start=1):
        seg = cost.segment_cost(l, r)
        lines.append(f"{idx},{l},{r},{r - l + 1},{seg:.17g}")
    lines.append(f"total,{cost.kind},{clustering.total_cost:.17g}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_clustering(path) -> tuple[IntervalClustering, str, tuple[float, ...]]:
    """Read a cluster table; returns (clustering, cost kind, segment costs)."""
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty cluster file")
    magic, _, version = lines[0].partition(" ")
    if magic != CLUSTERS_MAGIC:
        raise FormatError(f"{path}: not a cluster file (header {lines[0]!r})")
    if version != CLUSTERS_VERSION:
        raise VersionError(f"{path}: unsupported cluster file version {version!r}")
    if len(lines) < 4 or lines[1] != _CLUSTERS_COLUMNS:
        raise FormatError(f"{path}: missing column header {_CLUSTERS_COLUMNS!r}")
    trailer = lines[-1].split(",")
    if len(trailer) != 3 or trailer[0] != "total":
        raise FormatError(f"{path}: missing total trailer")
    kind = trailer[1]
    if kind not in COST_KINDS:
        raise FormatError(f"{path}: unknown cost kind {kind!r}")
    bounds = []
    seg_costs = []
    try:
        total = float(trailer[2])
        for row_num, line in enumerate(lines[2:-1], start=1):
            idx_s, l_s, r_s, size_s, cost_s = line.split(",")
            if int(idx_s) != row_num:
                raise ValueError(f"row index {idx_s} out of order")
            l, r, size = int(l_s), int(r_s), int(size_s)
            if size != r - l + 1:
                raise ValueError(f"size {size} does not match [{l}, {r}]")
            bounds.append((l, r))
            seg_costs.append(float(cost_s))
    except ValueError as e:
        raise FormatError(f"{path}: corrupt cluster row ({e})") from e
    try:
        clustering = IntervalClustering(k=len(bounds), bounds=tuple(bounds), total_cost=total)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    if abs(sum(seg_costs) - total) > 1e-9 * max(1.0, abs(total)):
        raise FormatError(f"{path}: segment costs sum to {sum(seg_costs)}, trailer says {total}")
    return clustering, kind, tuple(seg_costs)
