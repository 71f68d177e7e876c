"""Closed-form flow-matching identities and ensemble uncertainty metrics."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.stats import norm

from .tensor_core import DimensionError

CAL_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


class SingularTimeError(ValueError):
    """The conditional velocity (g - z) / (1 - t) is undefined at t >= 1."""


def marginal_gaussian_velocity(z, t: float):
    """Optimal velocity when source and data are independent, equal-covariance,
    zero-mean Gaussians: ``(2t - 1) / (2t^2 - 2t + 1) * z``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return (2.0 * t - 1.0) / (2.0 * t * t - 2.0 * t + 1.0) * np.asarray(z, dtype=np.float64)


def conditional_bayes_velocity(g, z, t: float) -> np.ndarray:
    """Regression target given the data endpoint: ``(g - z) / (1 - t)``."""
    if t >= 1.0:
        raise SingularTimeError(f"conditional velocity is singular at t={t}")
    g = np.asarray(g, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if g.shape != z.shape:
        raise DimensionError(f"shape mismatch {g.shape} vs {z.shape}")
    return (g - z) / (1.0 - t)


def residual_variance_ratio(rho: float) -> float:
    """Residual-to-fine variance ratio for equal-variance fields with correlation ``rho``."""
    if not -1.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    return 2.0 * (1.0 - rho)


def residual_variance_general(sigma_hf, sigma_lf, rho):
    """Variance of (hf - lf) from the two standard deviations and their correlation."""
    sigma_hf = np.asarray(sigma_hf, dtype=np.float64)
    sigma_lf = np.asarray(sigma_lf, dtype=np.float64)
    if np.any(sigma_hf < 0) or np.any(sigma_lf < 0):
        raise ValueError("standard deviations must be non-negative")
    return sigma_hf ** 2 + sigma_lf ** 2 - 2.0 * np.asarray(rho) * sigma_hf * sigma_lf


# ---------------------------------------------------------------- UQ metrics


@dataclass(frozen=True)
class UqReport:
    nrmse: float
    crps: float
    coverage90: float
    sharpness90: float
    spread_over_rmse: float
    corr_sigma_abserr: float
    cal_err: float

    CSV_HEADER = "nrmse,crps,coverage90,sharpness90,spread_over_rmse,corr_sigma_abserr,cal_err"

    def as_row(self) -> list[float]:
        return list(astuple(self))

    def csv_row(self) -> str:
        return ",".join(f"{v:.10g}" for v in astuple(self))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def crps_ensemble(members, truth) -> np.ndarray:
    """Per-coordinate CRPS of an ensemble ``(K, ...)`` against ``truth``.

    The pairwise term ``(1 / 2K^2) sum_{k,k'} |x_k - x_k'|`` is evaluated from
    the gaps of the sorted members, ``sum_j gap_j * j * (K - j) / K^2``, which
    is exactly zero for a collapsed ensemble.
    """
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    k = x.shape[0]
    skill = np.abs(x - y).mean(axis=0)
    gaps = np.diff(np.sort(x, axis=0), axis=0)
    j = np.arange(1, k)
    w = (j * (k - j)).reshape((k - 1,) + (1,) * (x.ndim - 1))
    spread = (w * gaps).sum(axis=0) / (k * k)
    return skill - spread


def gaussian_crps(mu, sigma, y) -> np.ndarray:
    """Closed-form CRPS of N(mu, sigma^2) at observation ``y``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    yp = (np.asarray(y, dtype=np.float64) - mu) / sigma
    return sigma * (yp * (2.0 * norm.cdf(yp) - 1.0) + 2.0 * norm.pdf(yp) - 1.0 / math.sqrt(math.pi))


def central_interval(members, q: float):
    """Empirical central ``q`` interval per coordinate.

    Quantiles use Weibull plotting positions (the j-th of K sorted members sits
    at level j / (K + 1)), so a truth exchangeable with the members falls inside
    with probability ``q`` for any ensemble size; plain linear interpolation
    would give about (qK - q + 1) / (K + 1) instead, 0.882 at K = 100.
    """
    lo, hi = np.quantile(np.asarray(members, dtype=np.float64), [(1 - q) / 2, (1 + q) / 2], axis=0,
                         method="weibull")
    return lo, hi


def coverage(members, truth, q: float) -> float:
    lo, hi = central_interval(members, q)
    y = np.asarray(truth, dtype=np.float64)
    return float(np.mean((y >= lo) & (y <= hi)))


def uq_metrics(ensembles, truths) -> UqReport:
    """Aggregate UQ metrics over samples; every per-coordinate quantity is pooled.

    ``ensembles`` holds one member array ``(K, ...)`` (or an object with a
    ``members`` attribute) per sample. ``spread_over_rmse`` is reported as NaN
    when both numerator and denominator vanish.
    """
    members = [np.asarray(getattr(e, "members", e), dtype=np.float64) for e in ensembles]
    truths = [np.asarray(t, dtype=np.float64) for t in truths]
    if len(members) != len(truths) or not members:
        raise ValueError("need one truth per ensemble")
    for m, t in zip(members, truths):
        if m.shape[0] < 2:
            raise ValueError("ensembles need at least two members")
        if m.shape[1:] != t.shape:
            raise DimensionError(f"ensemble {m.shape} does not match truth {t.shape}")

    crps, std, err, nrm, cov90, width = [], [], [], [], [], []
    cov_q = np.zeros(len(CAL_LEVELS))
    n_coord = 0
    for m, t in zip(members, truths):
        mean = m.mean(axis=0)
        crps.append(crps_ensemble(m, t).ravel())
        std.append(m.std(axis=0).ravel())
        err.append((mean - t).ravel())
        ref = np.linalg.norm(t.ravel())
        nrm.append(np.linalg.norm((mean - t).ravel()) / ref if ref > 0 else np.nan)
        lo, hi = central_interval(m, 0.9)
        cov90.append(((t >= lo) & (t <= hi)).ravel())
        width.append((hi - lo).ravel())
        for j, q in enumerate(CAL_LEVELS):
            cov_q[j] += coverage(m, t, q) * t.size
        n_coord += t.size
    std = np.concatenate(std)
    err = np.concatenate(err)
    rmse = math.sqrt(float(np.mean(err ** 2)))
    mean_std = float(std.mean())
    if rmse == 0.0:
        ratio = float("nan") if mean_std == 0.0 else float("inf")
    else:
        ratio = mean_std / rmse
    abserr = np.abs(err)
    if std.std() == 0.0 or abserr.std() == 0.0:
        corr = float("nan")
    else:
        corr = float(np.corrcoef(std, abserr)[0, 1])
    cal = float(np.mean(np.abs(np.array(CAL_LEVELS) - cov_q / n_coord)))
    return UqReport(
        nrmse=float(np.nanmean(nrm)),
        crps=float(np.concatenate(crps).mean()),
        coverage90=float(np.concatenate(cov90).mean()),
        sharpness90=float(np.concatenate(width).mean()),
        spread_over_rmse=ratio,
        corr_sigma_abserr=corr,
        cal_err=cal,
    )
