"""Variance-preserving noise schedule and the closed-form noising process.

A schedule assigns each discrete timestep t in {1, ..., T} a signal scale
``alpha_t`` and noise scale ``sigma_t`` with ``alpha_t^2 + sigma_t^2 = 1``.
Noising a clean point x0 to level t draws ``alpha_t * x0 + sigma_t * eps``
with standard normal eps, and the signal-to-noise ratio
``alpha_t^2 / sigma_t^2`` decreases strictly in t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

# A schedule whose terminal SNR is above this leaves visible signal at t = T,
# which makes pure-noise initialisation of a sampler inconsistent.
TERMINAL_SNR_SOFT_LIMIT = 1e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep signal/noise scales, 1-indexed via ``alpha(t)``/``sigma(t)``.

    ``signal`` and ``noise`` arrays are float64 of length T and store the
    value for timestep t at index t - 1.  Instances are immutable; builders
    like :meth:`linear` validate the monotone-SNR requirement once.
    """

    T: int
    signal: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"schedule needs at least 2 timesteps, got T={self.T}")
        sig = np.ascontiguousarray(self.signal, dtype=np.float64)
        noi = np.ascontiguousarray(self.noise, dtype=np.float64)
        if sig.shape != (self.T,) or noi.shape != (self.T,):
            raise ValueError("signal/noise arrays must have shape (T,)")
        if np.any(sig <= 0.0) or np.any(noi <= 0.0):
            raise ValueError("signal and noise scales must be strictly positive")
        var = sig**2 + noi**2
        if np.max(np.abs(var - 1.0)) > 1e-9:
            raise ValueError("schedule is not variance preserving: alpha^2 + sigma^2 != 1")
        snr = sig**2 / noi**2
        if np.any(np.diff(snr) >= 0.0):
            raise ValueError("signal-to-noise ratio must decrease strictly in t")
        object.__setattr__(self, "signal", sig)
        object.__setattr__(self, "noise", noi)
        if snr[-1] >= TERMINAL_SNR_SOFT_LIMIT:
            log.warning(
                "terminal SNR %.3g >= %.0e; samples at t=T retain visible signal",
                snr[-1], TERMINAL_SNR_SOFT_LIMIT,
            )

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        """Build the linear-variance schedule.

        Per-step variances beta_t interpolate linearly from ``beta_start`` at
        t = 1 to ``beta_end`` at t = T; ``alpha_t^2`` is the running product
        of ``(1 - beta_t)``.
        """
        if T < 2:
            raise ValueError(f"schedule needs at least 2 timesteps, got T={T}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alpha_sq = np.cumprod(1.0 - beta)
        return cls(T=T, signal=np.sqrt(alpha_sq), noise=np.sqrt(1.0 - alpha_sq))

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise IndexError(f"timesteps must be integers, got dtype {t.dtype}")
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timestep out of range 1..{self.T}")
        return t

    def alpha(self, t):
        """Signal scale at timestep t (scalar or array, 1-indexed)."""
        return self.signal[self._check_t(t) - 1]

    def sigma(self, t):
        """Noise scale at timestep t (scalar or array, 1-indexed)."""
        return self.noise[self._check_t(t) - 1]

    def snr(self, t):
        """Signal-to-noise ratio alpha_t^2 / sigma_t^2."""
        t = self._check_t(t)
        return self.signal[t - 1] ** 2 / self.noise[t - 1] ** 2

    def log_snr(self, t):
        return np.log(self.snr(t))

    def log_snr_all(self) -> np.ndarray:
        """log SNR for every timestep 1..T, as an array of length T."""
        return np.log(self.signal**2 / self.noise**2)

    def transition_coeffs(self, s: int, t: int) -> tuple[float, float]:
        """Coefficients (a, v) with x_t | x_s ~ Normal(a * x_s, v * I) for s < t.

        ``a`` is alpha_t / alpha_s and ``v = sigma_t^2 - a^2 sigma_s^2``; with
        monotone SNR the variance is strictly positive.
        """
        s = int(self._check_t(s))
        t = int(self._check_t(t))
        if not s < t:
            raise ValueError(f"transition needs s < t, got s={s}, t={t}")
        a = self.signal[t - 1] / self.signal[s - 1]
        v = self.noise[t - 1] ** 2 - a**2 * self.noise[s - 1] ** 2
        return float(a), float(v)

    def forward_sample(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """Noise clean data to level t: ``alpha_t * x0 + sigma_t * eps``.

        ``t`` may be a scalar applied to the whole batch or one timestep per
        row of ``x0``; ``eps`` must match ``x0`` in shape.
        """
        x0 = np.asarray(x0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if x0.shape != eps.shape:
            raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
        t = self._check_t(t)
        a = self.signal[t - 1]
        s = self.noise[t - 1]
        if t.ndim == 1 and x0.ndim == 2:
            if t.shape[0] != x0.shape[0]:
                raise ValueError(
                    f"per-row timesteps need len(t) == len(x0), got {t.shape[0]} vs {x0.shape[0]}"
                )
            a = a[:, None]
            s = s[:, None]
        elif t.ndim != 0:
            raise ValueError("t must be a scalar or a 1-D array matching the batch")
        return a * x0 + s * eps
