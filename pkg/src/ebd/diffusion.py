"""Blurring forward process toward the coarse fragment structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import remove_mean


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 50
    sigma: float = 0.01
    delta: float = 0.0125

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        if not (self.sigma >= 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma!r}")
        if not (self.delta >= 0 and np.isfinite(self.delta)):
            raise ValueError(f"delta must be finite and >= 0, got {self.delta!r}")

    def t_norm(self, t: int) -> float:
        return t / self.T


def _frag_coords(coarse):
    return np.asarray(getattr(coarse, "frag_coords", coarse), dtype=np.float64)


def _check_t(t, T):
    if int(t) != t or not 0 <= t <= T:
        raise ValueError(f"time step {t!r} outside [0, {T}]")


def blur(x0, coarse, mapping, t: int, T: int) -> np.ndarray:
    """Linear interpolation from ``x0`` (t=0) to the lifted fragment coordinates (t=T)."""
    _check_t(t, T)
    x0 = np.asarray(x0, dtype=np.float64)
    target = mapping.lift(_frag_coords(coarse))
    if x0.shape != target.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match {target.shape}")
    s = t / T
    return (1.0 - s) * x0 + s * target


def centered_noise(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    eps = rng.normal(0.0, scale, size=(n, 3)) if scale > 0 else np.zeros((n, 3))
    return remove_mean(eps)


def forward_sample(x0, coarse, mapping, t: int, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """``blur`` plus zero-centre-of-mass Gaussian noise of scale sigma."""
    xb = blur(x0, coarse, mapping, t, schedule.T)
    if schedule.sigma == 0:
        return xb
    return xb + centered_noise(rng, xb.shape[0], schedule.sigma)


def prior_sample(coarse, mapping, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Atoms placed at their fragment centroid, jittered by centred noise of scale delta."""
    x = mapping.lift(_frag_coords(coarse))
    if schedule.delta == 0:
        return x
    return x + centered_noise(rng, x.shape[0], schedule.delta)
