"""Level residuals, their per-coordinate statistics, and the calibrated source sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import DimensionError, prolong_bilinear

VARIANCE_FLOOR = 1e-8
SOURCE_KINDS = ("calibrated_blur", "diagonal", "iid_matched")


@dataclass(frozen=True)
class ResidualStats:
    """Per-coordinate residual variance for one cascade level (floored)."""

    level: int
    sigma2: np.ndarray
    floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        s = np.maximum(np.asarray(self.sigma2, dtype=np.float64), self.floor)
        s.setflags(write=False)
        object.__setattr__(self, "sigma2", s)

    @property
    def shape(self):
        return self.sigma2.shape

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)


@dataclass(frozen=True)
class SourceSpec:
    kind: str = "calibrated_blur"
    tau: float = 1.5
    eps_num: float = 1e-8

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}; expected one of {SOURCE_KINDS}")
        if self.tau <= 0 or self.eps_num <= 0:
            raise ValueError("tau and eps_num must be positive")


def level_residual(target, conditioning) -> np.ndarray:
    """``target - prolong(conditioning)`` on the target grid."""
    target = np.asarray(target, dtype=np.float64)
    cond = np.asarray(conditioning, dtype=np.float64)
    if target.shape[:-2] != cond.shape[:-2]:
        raise DimensionError(f"channel/batch mismatch {target.shape} vs {cond.shape}")
    return target - prolong_bilinear(cond, target.shape[-1])


def compute_residual_stats(residuals, level: int = 0, floor: float = VARIANCE_FLOOR) -> ResidualStats:
    """Population variance over the sample axis, per coordinate, floored."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim < 1 or r.shape[0] == 0:
        raise ValueError("need at least one residual")
    return ResidualStats(level, r.var(axis=0), floor)


def gaussian_kernel(tau: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3 tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    r = math.ceil(3 * tau)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / tau) ** 2)
    return k / k.sum()


def _blur_axis(f: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = k.size // 2
    pad = [(0, 0)] * f.ndim
    pad[axis] = (r, r)
    g = np.pad(f, pad, mode="reflect")
    n = f.shape[axis]
    out = f.copy()
    # centre-anchored form keeps constants exact
    for j, w in enumerate(k):
        if j == r:
            continue
        out += w * (np.take(g, np.arange(j, j + n), axis=axis) - f)
    return out


def gaussian_blur_depthwise(f, tau: float) -> np.ndarray:
    """Per-channel separable Gaussian blur with reflect padding."""
    f = np.asarray(f, dtype=np.float64)
    k = gaussian_kernel(tau)
    if k.size // 2 >= f.shape[-1]:
        raise DimensionError(f"blur radius {k.size // 2} too large for a {f.shape[-1]} grid")
    return _blur_axis(_blur_axis(f, k, -2), k, -1)


def stationary_blur_noise(shape, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-blurred white noise of the given shape with spatially uniform variance.

    The white noise is drawn with a margin of one kernel radius on each side
    and only fully supported outputs are kept, so no padding enters the
    statistics (reflect padding would inflate the variance near the edges).
    """
    k = gaussian_kernel(tau)
    r = k.size // 2
    h, w = shape[-2], shape[-1]
    z = rng.standard_normal(tuple(shape[:-2]) + (h + 2 * r, w + 2 * r))
    rows = sum(wj * z[..., j:j + h, :] for j, wj in enumerate(k))
    return sum(wj * rows[..., :, j:j + w] for j, wj in enumerate(k))


def standardized_blur_noise(shape, tau: float, eps_num: float, rng: np.random.Generator) -> np.ndarray:
    """Blurred white noise scaled to unit standard deviation per sample (all of C, H, W)."""
    z = stationary_blur_noise(shape, tau, rng)
    axes = tuple(range(z.ndim - 3, z.ndim))
    return z / (z.std(axis=axes, keepdims=True) + eps_num)


def sample_source(stats: ResidualStats, spec: SourceSpec, rng: np.random.Generator,
                  n_samples: int | None = None) -> np.ndarray:
    """Draw source samples; shape ``stats.shape`` or ``(n_samples, *stats.shape)``."""
    shape = stats.shape if n_samples is None else (n_samples, *stats.shape)
    if spec.kind == "calibrated_blur":
        return stats.sigma * standardized_blur_noise(shape, spec.tau, spec.eps_num, rng)
    z = rng.standard_normal(shape)
    if spec.kind == "diagonal":
        return stats.sigma * z
    return math.sqrt(float(stats.sigma2.mean())) * z


def transport_scale_estimate(residuals, stats: ResidualStats, spec: SourceSpec, n_draws: int,
                             rng: np.random.Generator, chunk: int = 1024) -> float:
    """Monte-Carlo estimate of E||delta - eps||^2 with delta drawn from ``residuals``."""
    if spec.kind == "iid_matched":
        raise ValueError("transport estimate is defined for diagonal or calibrated sources")
    r = np.asarray(residuals, dtype=np.float64)
    total = 0.0
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        d = r[rng.integers(0, r.shape[0], size=m)]
        e = sample_source(stats, spec, rng, n_samples=m)
        total += float(np.sum((d - e) ** 2))
        done += m
    return total / n_draws
