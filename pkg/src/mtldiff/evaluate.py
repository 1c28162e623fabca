"""Deterministic sampling and distribution-distance evaluation.

Sampling inverts the noising process along an evenly strided decreasing
timestep path with deterministic updates, so a sample set is a pure function
of (model, schedule, step count, seed).  Sample quality is scored as a
sliced 2-Wasserstein distance to held-out reference data, and the
negative-transfer gap compares that score before and after swapping an
interval specialist into the sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import MlpDenoiser

SW_DEFAULT_PROJECTIONS = 128
NTG_DEFAULT_SAMPLES = 4096
NTG_DEFAULT_STEPS = 50
NTG_DEFAULT_INTERVAL_COUNT = 5


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly strided decreasing timesteps from T down to 1, deduplicated."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    ts = np.rint(np.linspace(T, 1, n_steps)).astype(np.int64)
    keep = np.concatenate([[True], np.diff(ts) != 0])
    return ts[keep]


def _predictor(model, schedule):
    if isinstance(model, MlpDenoiser):
        return lambda X, t: model.predict_batch(X, t, schedule)
    if callable(model):
        return model
    raise TypeError(f"model must be an MlpDenoiser or a callable, got {type(model)!r}")


def ddim_sample(model, schedule, n_steps: int, n_samples: int, seed: int,
                data_dim: int = 2) -> np.ndarray:
    """Draw n_samples deterministically, starting from seeded pure noise.

    At each visited timestep the model's noise prediction gives a clean-data
    estimate ``(x_t - sigma_t eps_hat) / alpha_t``, which is re-noised to the
    next (smaller) timestep; the final clean estimate is returned.  ``model``
    may be an :class:`MlpDenoiser` or a callable ``(X, t) -> eps_hat``.
    """
    if n_samples < 1:
        raise ValueError(f"need n_samples >= 1, got {n_samples}")
    predict = _predictor(model, schedule)
    ts = ddim_timesteps(schedule.T, n_steps)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, data_dim))
    x0_hat = X
    for i, t in enumerate(ts):
        t = int(t)
        eps_hat = np.asarray(predict(X, t))
        if eps_hat.shape != X.shape:
            raise ValueError(f"predictor returned shape {eps_hat.shape}, expected {X.shape}")
        a = float(schedule.alpha(t))
        s = float(schedule.sigma(t))
        x0_hat = (X - s * eps_hat) / a
        if i + 1 < len(ts):
            t2 = int(ts[i + 1])
            X = float(schedule.alpha(t2)) * x0_hat + float(schedule.sigma(t2)) * eps_hat
    return x0_hat


def hybrid_ddim_sample(full_model, specialist, interval, schedule, n_steps: int,
                       n_samples: int, seed: int, data_dim: int = 2) -> np.ndarray:
    """Deterministic sampling with the specialist serving timesteps in
    ``interval = (t1, t2)`` and the full model serving the rest.

    With the same seed and step count this walks the exact trajectory of
    :func:`ddim_sample` except for the swapped predictions, so differences
    in the output isolate the model swap.
    """
    t1, t2 = int(interval[0]), int(interval[1])
    if not 1 <= t1 <= t2 <= schedule.T:
        raise ValueError(f"interval must satisfy 1 <= t1 <= t2 <= {schedule.T}, got {interval}")
    predict_full = _predictor(full_model, schedule)
    predict_spec = _predictor(specialist, schedule)

    def routed(X, t):
        return predict_spec(X, t) if t1 <= t <= t2 else predict_full(X, t)

    return ddim_sample(routed, schedule, n_steps, n_samples, seed, data_dim)


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between equal-size 1-D empirical laws.

    With equal sample counts the optimal coupling is the sorted pairing, so
    the distance is the root mean squared difference of order statistics.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size == 0:
        raise ValueError(f"need matching nonempty samples, got sizes {a.size}, {b.size}")
    d = np.sort(a) - np.sort(b)
    return float(np.sqrt(np.mean(d * d)))


def sliced_wasserstein(A: np.ndarray, B: np.ndarray,
                       n_projections: int = SW_DEFAULT_PROJECTIONS, seed: int = 0,
                       directions: np.ndarray | None = None) -> float:
    """Root mean square of 1-D distances over random unit projections.

    Directions are seeded uniform draws from the unit sphere; pass
    ``directions`` explicitly to evaluate fixed projections instead (rows
    are normalised, zero rows rejected).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape != B.shape:
        raise ValueError(f"sample sets must match in shape, got {A.shape}, {B.shape}")
    d = A.shape[1]
    if directions is None:
        if n_projections < 1:
            raise ValueError(f"need n_projections >= 1, got {n_projections}")
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((n_projections, d))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if directions.shape[1] != d:
        raise ValueError(f"directions must have {d} columns, got {directions.shape}")
    norms = np.linalg.norm(directions, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm projection direction")
    U = directions / norms[:, None]
    PA = A @ U.T
    PB = B @ U.T
    dists = [wasserstein_1d(PA[:, i], PB[:, i]) for i in range(U.shape[0])]
    return float(np.sqrt(np.mean(np.square(dists))))


def ntg_intervals(T: int, count: int = NTG_DEFAULT_INTERVAL_COUNT) -> tuple[tuple[int, int], ...]:
    """Evenly sized contiguous measurement intervals covering 1..T."""
    if not 1 <= count <= T:
        raise ValueError(f"need 1 <= count <= T, got count={count}, T={T}")
    edges = [(i * T) // count for i in range(count + 1)]
    return tuple((edges[i] + 1, edges[i + 1]) for i in range(count))


@dataclass(frozen=True)
class NTGReport:
    """Distance to reference data with and without the specialist swap.

    ``ntg`` is ``metric_hybrid - metric_full``; the metric is a distance, so
    positive values mean swapping the interval specialist in hurt sample
    quality (negative transfer from the rest of the timesteps to that
    interval's task).
    """

    interval: tuple[int, int]
    metric_full: float
    metric_hybrid: float
    ntg: float
    sample_count: int
    sampler_steps: int
    seed: int


def ntg(full_model, specialist, interval, schedule, ref_data, *,
        n_steps: int = NTG_DEFAULT_STEPS, n_samples: int = NTG_DEFAULT_SAMPLES,
        seed: int = 0, n_projections: int = SW_DEFAULT_PROJECTIONS) -> NTGReport:
    """Negative-transfer gap for one interval.

    Both sample sets share the sampler seed and the projection seed; only
    the predictions inside ``interval`` differ, so the gap isolates the
    effect of replacing the full model there.  ``ref_data`` needs at least
    ``n_samples`` rows; larger sets are subsampled deterministically.
    """
    ref = np.atleast_2d(np.asarray(ref_data, dtype=np.float64))
    if ref.shape[0] < n_samples:
        raise ValueError(f"reference data has {ref.shape[0]} rows, need >= {n_samples}")
    if ref.shape[0] > n_samples:
        pick = np.random.default_rng((seed, 101)).choice(ref.shape[0], n_samples, replace=False)
        ref = ref[pick]
    data_dim = ref.shape[1]
    full = ddim_sample(full_model, schedule, n_steps, n_samples, seed, data_dim)
    hybrid = hybrid_ddim_sample(full_model, specialist, interval, schedule,
                                n_steps, n_samples, seed, data_dim)
    m_full = sliced_wasserstein(full, ref, n_projections, seed=seed)
    m_hybrid = sliced_wasserstein(hybrid, ref, n_projections, seed=seed)
    return NTGReport(
        interval=(int(interval[0]), int(interval[1])),
        metric_full=m_full,
        metric_hybrid=m_hybrid,
        ntg=m_hybrid - m_full,
        sample_count=int(n_samples),
        sampler_steps=int(n_steps),
        seed=int(seed),
    )
