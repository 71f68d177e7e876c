"""Fields on square grids, grid transfer operators and error metrics.

A field is a real array of shape ``(C, H, W)`` with ``H == W``; any number of
leading batch axes is accepted by the transfer operators and metrics, which
act on the two trailing (spatial) axes.

Prolongation uses the align-corners bilinear convention: the first and last
samples of the coarse grid land on the first and last samples of the fine
grid. Each axis is interpolated as ``f[i0] + w * (f[i1] - f[i0])`` so that
constant fields are reproduced bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

try:  # torch is only needed for the differentiable twin of prolong_bilinear
    import torch
except ImportError:  # pragma: no cover
    torch = None


class DimensionError(ValueError):
    """Raised when field shapes or resolutions are incompatible."""


class DegenerateReferenceError(ValueError):
    """Raised when a relative metric is taken against a zero reference."""


def as_field(values, dtype=np.float64) -> np.ndarray:
    """Validate and return ``values`` as a ``(..., C, H, W)`` float array."""
    f = np.asarray(values, dtype=dtype)
    if f.ndim < 3:
        raise DimensionError(f"field needs at least 3 axes (C, H, W), got shape {f.shape}")
    if f.shape[-1] != f.shape[-2]:
        raise DimensionError(f"fields must be square, got {f.shape[-2]}x{f.shape[-1]}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    return f


@dataclass(frozen=True)
class GridHierarchy:
    """Nested square resolutions n_0 < n_1 < ... < n_L with n_{l+1} = 2 n_l.

    ``strict=False`` relaxes the doubling rule to "strictly increasing", which
    the single-shot ablation needs for its two-entry hierarchy ``{n_0, n_L}``.
    """

    resolutions: tuple[int, ...]
    strict: bool = True

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        if len(res) < 2:
            raise DimensionError("a hierarchy needs at least two resolutions")
        if any(r <= 0 for r in res):
            raise DimensionError("resolutions must be positive")
        for a, b in zip(res, res[1:]):
            if b <= a or (self.strict and b != 2 * a):
                raise DimensionError(f"adjacent resolutions must double, got {a} -> {b}")

    @property
    def n_levels(self) -> int:
        """Number of refinement levels L (one network per level)."""
        return len(self.resolutions) - 1

    @property
    def coarsest(self) -> int:
        return self.resolutions[0]

    @property
    def finest(self) -> int:
        return self.resolutions[-1]


@lru_cache(maxsize=64)
def _axis_weights(n_src: int, n_dst: int):
    # exact rational positions i * (n_src - 1) / (n_dst - 1)
    i = np.arange(n_dst)
    if n_dst == 1 or n_src == 1:
        i0 = np.zeros(n_dst, dtype=np.int64)
        return i0, i0.copy(), np.zeros(n_dst)
    num = i * (n_src - 1)
    i0 = num // (n_dst - 1)
    w = (num % (n_dst - 1)) / (n_dst - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, w


def _check_prolong(n_src: int, target_resolution: int):
    if target_resolution < n_src:
        raise DimensionError(
            f"cannot prolong from {n_src} down to {target_resolution}; use restrict_average"
        )


def prolong_bilinear(f, target_resolution: int) -> np.ndarray:
    """Align-corners bilinear interpolation of ``f`` onto a finer square grid."""
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[-1]
    _check_prolong(n, target_resolution)
    if target_resolution == n:
        return f.copy()
    i0, i1, w = _axis_weights(n, target_resolution)
    rows = f[..., i0, :] + w[:, None] * (f[..., i1, :] - f[..., i0, :])
    return rows[..., i0] + w * (rows[..., i1] - rows[..., i0])


def prolong_bilinear_torch(f: "torch.Tensor", target_resolution: int) -> "torch.Tensor":
    """Differentiable twin of :func:`prolong_bilinear`; same arithmetic, same order."""
    n = f.shape[-1]
    _check_prolong(n, target_resolution)
    if target_resolution == n:
        return f
    i0, i1, w = _axis_weights(n, target_resolution)
    i0 = torch.as_tensor(i0)
    i1 = torch.as_tensor(i1)
    w = torch.as_tensor(w, dtype=f.dtype)
    rows = f[..., i0, :] + w[:, None] * (f[..., i1, :] - f[..., i0, :])
    return rows[..., i0] + w * (rows[..., i1] - rows[..., i0])


def prolong_chain(f, resolutions) -> np.ndarray:
    """Prolong level by level through ``resolutions`` (excluding the source)."""
    out = np.asarray(f, dtype=np.float64)
    for r in resolutions:
        out = prolong_bilinear(out, r)
    return out


def restrict_average(f, target_resolution: int) -> np.ndarray:
    """Non-overlapping block average onto a coarser grid.

    Even factors are reduced by repeated 2x2 averaging, which is exact on
    constant fields; any remaining odd factor uses a plain block mean.
    """
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[-1]
    if target_resolution <= 0 or n % target_resolution != 0:
        raise DimensionError(f"{n} is not an integer multiple of {target_resolution}")
    out = f
    factor = n // target_resolution
    while factor % 2 == 0:
        out = ((out[..., 0::2, 0::2] + out[..., 1::2, 0::2])
               + (out[..., 0::2, 1::2] + out[..., 1::2, 1::2])) / 4.0
        factor //= 2
    if factor > 1:
        m = out.shape[-1] // factor
        shape = out.shape[:-2] + (m, factor, m, factor)
        out = out.reshape(shape).mean(axis=(-3, -1))
    return out


def _check_pair(prediction, truth):
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def nrmse(prediction, truth) -> float:
    """Global relative L2 error ||prediction - truth|| / ||truth||."""
    p, t = _check_pair(prediction, truth)
    ref = np.linalg.norm(t.ravel())
    if ref == 0.0:
        raise DegenerateReferenceError("nrmse is undefined for an all-zero truth field")
    return float(np.linalg.norm((p - t).ravel()) / ref)


def mean_nrmse(predictions, truths) -> float:
    """Average of per-sample :func:`nrmse` over the leading (sample) axis."""
    p, t = _check_pair(predictions, truths)
    return float(np.mean([nrmse(a, b) for a, b in zip(p, t)]))


def relative_l2_loss(prediction, truth, eps: float) -> float:
    """||prediction - truth|| / (||truth|| + eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p, t = _check_pair(prediction, truth)
    return float(np.linalg.norm((p - t).ravel()) / (np.linalg.norm(t.ravel()) + eps))
