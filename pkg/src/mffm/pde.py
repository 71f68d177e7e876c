"""Paired multi-resolution PDE datasets: lognormal Darcy flow and viscous Burgers.

Every sample draws its randomness from ``np.random.default_rng([seed, index])``
so a dataset is reproducible independently of generation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .tensor_core import DimensionError, GridHierarchy, restrict_average

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when a PDE solve fails; carries the last residual (or failing time)."""

    def __init__(self, message: str, residual: float = float("nan"), time: float | None = None):
        super().__init__(message)
        self.residual = residual
        self.time = time


@dataclass(frozen=True)
class GrfSpec:
    """Stationary squared-exponential Gaussian random field.

    ``length_scale`` is measured in units of the (unit) domain length, so the
    same GrfSpec describes the same continuous field at every resolution.
    """

    resolution: int
    length_scale: float = 0.1
    variance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.variance < 0:
            raise ValueError("variance must be non-negative")


@dataclass
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]

    @classmethod
    def ratio_4_1_1(cls, n_samples: int) -> "DatasetSplit":
        n_val = n_samples // 6
        n_test = n_samples // 6
        n_train = n_samples - n_val - n_test
        idx = list(range(n_samples))
        return cls(idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])


@dataclass
class DarcySample:
    coefficient: list[np.ndarray]
    solution: list[np.ndarray]


@dataclass
class BurgersSample:
    spacetime: list[np.ndarray]
    initial: list[np.ndarray] = field(default_factory=list)


def _se_amplitude(n: int, ndim: int, length_scale: float) -> np.ndarray:
    k = np.fft.fftfreq(n, d=1.0 / n)
    k2 = k**2 if ndim == 1 else k[:, None] ** 2 + k[None, :] ** 2
    # square root of the squared-exponential spectral density
    return np.exp(-(np.pi**2) * length_scale**2 * k2)


def _spectral_field(noise: np.ndarray, length_scale: float, variance: float) -> np.ndarray:
    amp = _se_amplitude(noise.shape[0], noise.ndim, length_scale)
    g = np.real(np.fft.ifftn(np.fft.fftn(noise) * amp))
    # pointwise variance of the filtered white noise is sum(amp^2) / N
    return g * np.sqrt(variance * amp.size / np.sum(amp**2))


def sample_grf_2d(spec: GrfSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """One periodic 2-D GRF realization, shape ``(1, n, n)``."""
    if spec.resolution < 4:
        raise DimensionError("GRF resolution must be at least 4")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    noise = rng.standard_normal((spec.resolution, spec.resolution))
    if spec.variance == 0:
        return np.zeros((1, spec.resolution, spec.resolution))
    return _spectral_field(noise, spec.length_scale, spec.variance)[None]


def sample_grf_1d(spec: GrfSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """One periodic 1-D GRF realization of length ``spec.resolution``."""
    if spec.resolution < 4:
        raise DimensionError("GRF resolution must be at least 4")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    noise = rng.standard_normal(spec.resolution)
    if spec.variance == 0:
        return np.zeros(spec.resolution)
    return _spectral_field(noise, spec.length_scale, spec.variance)


# --------------------------------------------------------------------- Darcy

def darcy_grid(n: int) -> np.ndarray:
    """Node coordinates of an ``n``-point vertex-centred grid on [0, 1]."""
    return np.linspace(0.0, 1.0, n)


def _darcy_matrix(a: np.ndarray) -> sp.csr_matrix:
    n = a.shape[0]
    m = n - 2
    h2 = (1.0 / (n - 1)) ** 2
    # harmonic-mean face coefficients; ax[k] sits between rows k and k+1
    ax = 2 * a[1:, :] * a[:-1, :] / (a[1:, :] + a[:-1, :])
    ay = 2 * a[:, 1:] * a[:, :-1] / (a[:, 1:] + a[:, :-1])
    north = ax[0:m, 1:m + 1]
    south = ax[1:m + 1, 1:m + 1]
    west = ay[1:m + 1, 0:m]
    east = ay[1:m + 1, 1:m + 1]
    idx = np.arange(m * m).reshape(m, m)
    sv = -south[:-1, :].ravel() / h2
    ev = -east[:, :-1].ravel() / h2
    rows = np.concatenate([idx.ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel(),
                           idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    cols = np.concatenate([idx.ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel(),
                           idx[:, 1:].ravel(), idx[:, :-1].ravel()])
    vals = np.concatenate([(north + south + west + east).ravel() / h2, sv, sv, ev, ev])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m * m, m * m))


def pcg(A, b: np.ndarray, rtol: float = 1e-8, max_iter: int | None = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients on an SPD matrix."""
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x
    max_iter = max_iter or 10 * b.size
    dinv = 1.0 / A.diagonal()
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(r) / bnorm
    raise SolverError(f"PCG did not converge in {max_iter} iterations", residual=res)


def solve_darcy_fd(coefficient, forcing=1.0, rtol: float = 1e-8) -> np.ndarray:
    """Solve -div(a grad u) = f on the unit square with u = 0 on the boundary.

    Nodes sit at ``i / (n - 1)``; boundary rows and columns of the returned
    ``(1, n, n)`` field are exactly zero. ``forcing`` is a scalar or an
    ``(n, n)`` nodal array.
    """
    a = np.asarray(coefficient, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise DimensionError("Darcy coefficient must have a single channel")
        a = a[0]
    if a.shape[0] != a.shape[1] or a.shape[0] < 3:
        raise DimensionError(f"bad coefficient shape {a.shape}")
    if not np.all(a > 0):
        raise ValueError("Darcy coefficient must be strictly positive")
    n = a.shape[0]
    f = np.broadcast_to(np.asarray(forcing, dtype=np.float64), (n, n))
    A = _darcy_matrix(a)
    u_int = pcg(A, np.ascontiguousarray(f[1:-1, 1:-1]).ravel(), rtol=rtol)
    u = np.zeros((1, n, n))
    u[0, 1:-1, 1:-1] = u_int.reshape(n - 2, n - 2)
    return u


def generate_darcy_dataset(n_samples: int, hierarchy: GridHierarchy, grf: GrfSpec, seed: int,
                           forcing: float = 1.0):
    """Paired Darcy solutions on every level from one finest-grid coefficient per sample."""
    if grf.resolution != hierarchy.finest:
        raise DimensionError("GRF resolution must equal the finest hierarchy resolution")
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        a_fine = np.exp(sample_grf_2d(grf, rng))
        coefs, sols = [], []
        for r in hierarchy.resolutions:
            a = restrict_average(a_fine, r)
            try:
                u = solve_darcy_fd(a, forcing)
            except SolverError as exc:
                raise SolverError(f"Darcy sample {i} at {r}^2: {exc}", residual=exc.residual) from exc
            coefs.append(a)
            sols.append(u)
        samples.append(DarcySample(coefs, sols))
    return samples, DatasetSplit.ratio_4_1_1(n_samples)


# ------------------------------------------------------------------- Burgers

def _burgers_rhs(u: np.ndarray, h: float, nu: float) -> np.ndarray:
    up = np.roll(u, -1)
    um = np.roll(u, 1)
    # conservative central flux difference of u^2 / 2
    return -(up * up - um * um) / (4.0 * h) + nu * (up - 2.0 * u + um) / (h * h)


def solve_burgers(initial, viscosity: float = 0.01, horizon: float = 1.0,
                  cfl: float = 0.4, diffusion_number: float = 0.5) -> np.ndarray:
    """Space-time solution of u_t + u u_x = nu u_xx on the periodic unit interval.

    Returns a ``(1, s, s)`` field whose row ``k`` is the state at time
    ``k * horizon / s``; row 0 is the initial condition, so the snapshot times
    of an ``s``-point grid are a subset of those of a ``2s``-point grid.
    """
    u = np.array(initial, dtype=np.float64)
    s = u.size
    if u.ndim != 1 or s < 8:
        raise DimensionError("initial condition must be 1-D with at least 8 points")
    if viscosity <= 0:
        raise ValueError("viscosity must be positive")
    h = 1.0 / s
    gap = horizon / s
    out = np.empty((s, s))
    out[0] = u
    t = 0.0
    for k in range(1, s):
        umax = np.max(np.abs(u))
        dt = diffusion_number * h * h / viscosity
        if umax > 0:
            dt = min(dt, cfl * h / umax)
        nsub = max(1, int(np.ceil(gap / dt)))
        dt = gap / nsub
        for _ in range(nsub):
            k1 = _burgers_rhs(u, h, viscosity)
            k2 = _burgers_rhs(u + 0.5 * dt * k1, h, viscosity)
            k3 = _burgers_rhs(u + 0.5 * dt * k2, h, viscosity)
            k4 = _burgers_rhs(u + dt * k3, h, viscosity)
            u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += dt
            if not np.all(np.isfinite(u)):
                raise SolverError(f"Burgers state blew up at t={t:.6g}", time=t)
        out[k] = u
    return out[None]


def generate_burgers_dataset(n_samples: int, hierarchy: GridHierarchy, grf_1d: GrfSpec,
                             viscosity: float = 0.01, horizon: float = 1.0, seed: int = 0):
    """Paired space-time Burgers fields; each level subsamples one finest-grid IC."""
    if grf_1d.resolution != hierarchy.finest:
        raise DimensionError("GRF resolution must equal the finest hierarchy resolution")
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        ic = sample_grf_1d(grf_1d, rng)
        fields, ics = [], []
        for r in hierarchy.resolutions:
            u0 = ic[:: hierarchy.finest // r]
            try:
                fields.append(solve_burgers(u0, viscosity, horizon))
            except SolverError as exc:
                raise SolverError(f"Burgers sample {i} at s={r}: {exc}", time=exc.time) from exc
            ics.append(u0)
        samples.append(BurgersSample(fields, ics))
    return samples, DatasetSplit.ratio_4_1_1(n_samples)


def level_stack(samples, level: int) -> np.ndarray:
    """Stack the solution field at ``level`` of every sample into ``(N, C, n, n)``."""
    out = []
    for s in samples:
        out.append(s.solution[level] if isinstance(s, DarcySample) else s.spacetime[level])
    return np.stack(out)
