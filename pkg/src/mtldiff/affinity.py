"""Pairwise affinity between denoising timesteps from gradient alignment.

A snapshot takes one fixed probe batch, noises it to every grid timestep
with one shared noise draw, and records the full-probe parameter gradient
per timestep.  The affinity matrix is the running mean, across snapshots,
of the pairwise cosine similarities between those gradients.  High affinity
means two noise levels pull the parameters in similar directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, VersionError

AFFINITY_MAGIC = "MTLDIFF-AFFINITY"
AFFINITY_VERSION = "v1"

# Snapshot gradients with squared norm below this cannot be normalised.
ZERO_GRAD_FLOOR = 1e-30


def affinity_grid(T: int, stride: int = 1) -> np.ndarray:
    """Strided timestep grid 1, 1+stride, ... with T appended when missed."""
    if stride < 1 or T < 1:
        raise ValueError(f"need stride >= 1 and T >= 1, got {stride}, {T}")
    grid = np.arange(1, T + 1, stride, dtype=np.int64)
    if grid[-1] != T:
        grid = np.append(grid, T)
    return grid


def snapshot_gradients(model, schedule, probe: np.ndarray, noise_seed: int,
                       timesteps=None) -> np.ndarray:
    """Full-probe parameter gradient at each grid timestep, one row per t.

    The probe batch and its noise draw are shared across timesteps, so rows
    differ only through the noising level (common random numbers keep the
    pairwise comparisons low-variance).
    """
    probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    if probe.shape[0] < 1:
        raise ValueError("probe batch must be nonempty")
    if timesteps is None:
        timesteps = np.arange(1, schedule.T + 1, dtype=np.int64)
    timesteps = np.asarray(timesteps, dtype=np.int64)
    n = probe.shape[0]
    rng = np.random.default_rng(noise_seed)
    eps = rng.standard_normal(probe.shape)
    everything = np.arange(n)
    rows = []
    for t in timesteps:
        t_vec = np.full(n, t, dtype=np.int64)
        _, grad_fn = model.loss_and_grad(probe, t_vec, eps, schedule)
        rows.append(grad_fn(everything))
    return np.stack(rows)


@dataclass
class AffinityMatrix:
    """Running mean of pairwise gradient cosines over a timestep grid.

    ``values[i, j]`` is the mean cosine between the gradients at
    ``timesteps[i]`` and ``timesteps[j]``; the matrix stays symmetric with a
    unit diagonal by construction.
    """

    T: int
    timesteps: np.ndarray
    values: np.ndarray
    snapshots: int = 0

    def __post_init__(self):
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        g = self.timesteps.size
        if g < 1 or np.any(np.diff(self.timesteps) <= 0):
            raise ValueError("timestep grid must be strictly increasing and nonempty")
        if self.timesteps[0] < 1 or self.timesteps[-1] > self.T:
            raise ValueError(f"grid timesteps must lie in 1..{self.T}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (g, g):
            raise ValueError(f"values must be ({g}, {g}), got {self.values.shape}")
        if self.snapshots < 0:
            raise ValueError("snapshot count cannot be negative")

    @classmethod
    def empty(cls, T: int, timesteps=None) -> "AffinityMatrix":
        if timesteps is None:
            timesteps = np.arange(1, T + 1, dtype=np.int64)
        timesteps = np.asarray(timesteps, dtype=np.int64)
        g = timesteps.size
        return cls(T=T, timesteps=timesteps, values=np.zeros((g, g)), snapshots=0)

    def accumulate(self, grads: np.ndarray) -> None:
        """Fold one snapshot's per-timestep gradients into the running mean."""
        grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
        g = self.timesteps.size
        if grads.shape[0] != g:
            raise ValueError(f"expected {g} gradient rows, got {grads.shape[0]}")
        norms_sq = np.einsum("ij,ij->i", grads, grads)
        if np.any(norms_sq < ZERO_GRAD_FLOOR):
            raise ValueError("snapshot contains a zero-norm gradient; cosine undefined")
        N = grads / np.sqrt(norms_sq)[:, None]
        C = N @ N.T
        C = 0.5 * (C + C.T)
        np.fill_diagonal(C, 1.0)
        self.values = (self.values * self.snapshots + C) / (self.snapshots + 1)
        np.fill_diagonal(self.values, 1.0)
        self.snapshots += 1

    def dense(self) -> np.ndarray:
        """Affinity over the full 1..T grid, bilinear between grid points.

        Off-grid rows/columns interpolate linearly (clamped at the ends);
        the diagonal is pinned to 1.  With a full grid this is a copy.
        """
        if self.snapshots == 0:
            raise ValueError("no snapshots accumulated yet")
        if self.timesteps.size == self.T:
            return self.values.copy()
        t_full = np.arange(1, self.T + 1, dtype=np.float64)
        grid = self.timesteps.astype(np.float64)
        g = grid.size
        cols = np.empty((g, self.T))
        for i in range(g):
            cols[i] = np.interp(t_full, grid, self.values[i])
        out = np.empty((self.T, self.T))
        for j in range(self.T):
            out[:, j] = np.interp(t_full, grid, cols[:, j])
        out = 0.5 * (out + out.T)
        np.fill_diagonal(out, 1.0)
        return out


def write_affinity(base_path, matrix: AffinityMatrix) -> None:
    """Write ``<base>.csv`` (the matrix) and ``<base>.meta`` (the sidecar)."""
    base = str(base_path)
    header = f"{AFFINITY_MAGIC} {AFFINITY_VERSION}"
    np.savetxt(f"{base}.csv", matrix.values, fmt="%.17g", delimiter=",",
               header=header, comments="# ")
    lines = [
        header,
        f"T {matrix.T}",
        f"snapshots {matrix.snapshots}",
        "timesteps " + ",".join(str(int(t)) for t in matrix.timesteps),
    ]
    with open(f"{base}.meta", "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def write_log_snr_axis(path, schedule, timesteps) -> None:
    """Write a two-column t,log_snr table for the given grid timesteps."""
    timesteps = np.asarray(timesteps, dtype=np.int64)
    with open(path, "w", encoding="ascii") as f:
        f.write(f"# {AFFINITY_MAGIC} {AFFINITY_VERSION}\n")
        f.write("t,log_snr\n")
        for t in timesteps:
            f.write(f"{int(t)},{float(schedule.log_snr(int(t))):.17g}\n")


def read_affinity(base_path) -> AffinityMatrix:
    """Read the matrix/sidecar pair written by :func:`write_affinity`."""
    base = str(base_path)
    meta_path = f"{base}.meta"
    with open(meta_path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{meta_path}: empty sidecar")
    magic, _, version = lines[0].partition(" ")
    if magic != AFFINITY_MAGIC:
        raise FormatError(f"{meta_path}: not an affinity sidecar (header {lines[0]!r})")
    if version != AFFINITY_VERSION:
        raise VersionError(f"{meta_path}: unsupported affinity version {version!r}")
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        T = int(fields["T"])
        snapshots = int(fields["snapshots"])
        timesteps = np.array([int(s) for s in fields["timesteps"].split(",")])
    except (KeyError, ValueError) as e:
        raise FormatError(f"{meta_path}: missing or malformed field ({e})") from e
    try:
        values = np.loadtxt(f"{base}.csv", delimiter=",", comments="#", ndmin=2)
    except ValueError as e:
        raise FormatError(f"{base}.csv: corrupt matrix ({e})") from e
    g = timesteps.size
    if values.shape != (g, g):
        raise FormatError(f"{base}.csv: expected a {g}x{g} matrix, got {values.shape}")
    if np.max(np.abs(values - values.T)) > 1e-9:
        raise FormatError(f"{base}.csv: matrix is not symmetric")
    if np.max(np.abs(np.diag(values) - 1.0)) > 1e-9 or np.max(np.abs(values)) > 1.0 + 1e-9:
        raise FormatError(f"{base}.csv: entries outside the valid cosine range")
    try:
        return AffinityMatrix(T=T, timesteps=timesteps, values=values, snapshots=snapshots)
    except ValueError as e:
        raise FormatError(f"{meta_path}: {e}") from e
