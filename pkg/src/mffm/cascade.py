"""Inference with a trained cascade: one-step point prediction, multi-NFE Euler
rollouts and stochastic source-sampled ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .source import ResidualStats, SourceSpec, sample_source
from .tensor_core import DimensionError, GridHierarchy, mean_nrmse, prolong_bilinear, prolong_bilinear_torch
from .velocity_net import VelocityNet

DEFAULT_NFE_LIST = (1, 2, 5, 10, 50)


@dataclass
class CascadeModel:
    """Per-level networks, residual statistics and sources over a grid hierarchy.

    ``target`` is ``"residual"`` (each level adds its output to the prolonged
    state) or ``"field"`` (each level's output *is* the next state; used by
    the field-space ablation).
    """

    hierarchy: GridHierarchy
    nets: list[VelocityNet]
    stats: list[ResidualStats]
    sources: list[SourceSpec]
    target: str = "residual"
    n_evals: int = field(default=0, compare=False)
    selected: dict | None = field(default=None, compare=False)  # fine-tuning checkpoint choice

    def __post_init__(self):
        L = self.hierarchy.n_levels
        if not (len(self.nets) == len(self.stats) == len(self.sources) == L):
            raise ValueError(f"need {L} nets/stats/sources, got "
                             f"{len(self.nets)}/{len(self.stats)}/{len(self.sources)}")
        if self.target not in ("residual", "field"):
            raise ValueError(f"unknown target mode {self.target!r}")

    @property
    def n_levels(self) -> int:
        return self.hierarchy.n_levels

    def velocity(self, level: int, state: np.ndarray, t: float, cond: np.ndarray) -> np.ndarray:
        """One network evaluation on float64 numpy batches; counted in ``n_evals``."""
        net = self.nets[level]
        dtype = next(net.parameters()).dtype
        self.n_evals += 1
        with torch.no_grad():
            v = net(torch.as_tensor(state, dtype=dtype), t, torch.as_tensor(cond, dtype=dtype))
        return v.numpy().astype(np.float64)

    def compose(self, prolonged: np.ndarray, delta: np.ndarray) -> np.ndarray:
        return prolonged + delta if self.target == "residual" else delta


def _batched(u0, n0: int):
    u0 = np.asarray(u0, dtype=np.float64)
    single = u0.ndim == 3
    if single:
        u0 = u0[None]
    if u0.ndim != 4 or u0.shape[-1] != n0 or u0.shape[-2] != n0:
        raise DimensionError(f"input must be (B, C, {n0}, {n0}) or (C, {n0}, {n0}), got {u0.shape}")
    return u0, single


def predict_deterministic(model: CascadeModel, u0) -> np.ndarray:
    """Zero state, one midpoint evaluation per level: u_{l+1} = I(u_l) + v_l(0, 1/2, I(u_l))."""
    u, single = _batched(u0, model.hierarchy.coarsest)
    for level, res in enumerate(model.hierarchy.resolutions[1:]):
        cond = prolong_bilinear(u, res)
        v = model.velocity(level, np.zeros_like(cond), 0.5, cond)
        u = model.compose(cond, v)
    return u[0] if single else u


def rollout_euler(model: CascadeModel, u0, nfe_per_level: int) -> np.ndarray:
    """Deterministic rollout with ``nfe_per_level`` Euler steps per level.

    ``nfe_per_level == 1`` is the midpoint operating point of
    :func:`predict_deterministic`; larger values use left-endpoint Euler on
    the uniform grid ``t = 0, 1/nfe, ...``.
    """
    if nfe_per_level < 1:
        raise ValueError("nfe_per_level must be >= 1")
    if nfe_per_level == 1:
        return predict_deterministic(model, u0)
    u, single = _batched(u0, model.hierarchy.coarsest)
    dt = 1.0 / nfe_per_level
    for level, res in enumerate(model.hierarchy.resolutions[1:]):
        cond = prolong_bilinear(u, res)
        delta = np.zeros_like(cond)
        for k in range(nfe_per_level):
            delta = delta + dt * model.velocity(level, delta, k * dt, cond)
        u = model.compose(cond, delta)
    return u[0] if single else u


@dataclass
class EnsemblePrediction:
    members: np.ndarray  # (K, ...) finest-grid fields
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_members(cls, members) -> "EnsemblePrediction":
        m = np.asarray(members, dtype=np.float64)
        return cls(m, m.mean(axis=0), m.std(axis=0))

    @property
    def spread(self) -> float:
        """Mean over coordinates of the per-coordinate ensemble standard deviation."""
        return float(self.std.mean())

    @property
    def k(self) -> int:
        return self.members.shape[0]


def _stochastic_member(model: CascadeModel, u: np.ndarray, rng: np.random.Generator,
                       nfe_per_level: int, source_kind: str | None) -> np.ndarray:
    for level, res in enumerate(model.hierarchy.resolutions[1:]):
        cond = prolong_bilinear(u, res)
        spec = model.sources[level]
        if source_kind is not None:
            spec = SourceSpec(source_kind, spec.tau, spec.eps_num)
        delta = sample_source(model.stats[level], spec, rng, n_samples=cond.shape[0])
        if nfe_per_level == 1:
            delta = delta + model.velocity(level, delta, 0.5, cond)
        else:
            dt = 1.0 / nfe_per_level
            for k in range(nfe_per_level):
                delta = delta + dt * model.velocity(level, delta, k * dt, cond)
        u = model.compose(cond, delta)
    return u


def sample_stochastic_ensemble(model: CascadeModel, u0, K: int, seed: int = 0, nfe_per_level: int = 1,
                               source_kind: str | None = None, streams=None) -> EnsemblePrediction:
    """K source-initialized rollouts; member k uses the stream ``default_rng([seed, k])``.

    ``streams`` overrides the per-member generators; ``source_kind`` swaps the
    source family at inference (e.g. ``"iid_matched"``) on the same networks.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    u, single = _batched(u0, model.hierarchy.coarsest)
    if streams is None:
        streams = [np.random.default_rng([seed, k]) for k in range(K)]
    if len(streams) != K:
        raise ValueError("need one stream per member")
    members = [_stochastic_member(model, u, rng, nfe_per_level, source_kind) for rng in streams]
    members = np.stack(members)
    if single:
        members = members[:, 0]
    return EnsemblePrediction.from_members(members)


def nfe_scan(model: CascadeModel, u0, truth, nfe_list=DEFAULT_NFE_LIST) -> list[dict]:
    """Mean test NRMSE for each per-level NFE; ``total_nfe = nfe * L``."""
    rows = []
    for nfe in nfe_list:
        pred = rollout_euler(model, u0, nfe)
        rows.append({"nfe": int(nfe), "total_nfe": int(nfe) * model.n_levels,
                     "nrmse": mean_nrmse(pred, truth)})
    return rows


def rollout_torch(nets, u0: torch.Tensor, resolutions, target: str = "residual",
                  sources=None, t_eval: float = 0.5) -> torch.Tensor:
    """Differentiable one-evaluation-per-level rollout used for end-to-end training.

    ``sources[l]`` (optional) is the initial state at level ``l``; ``None``
    means the deterministic zero state.
    """
    u = u0
    for level, res in enumerate(resolutions[1:]):
        cond = prolong_bilinear_torch(u, res)
        delta = torch.zeros_like(cond) if sources is None else sources[level]
        delta = delta + nets[level](delta, t_eval, cond)
        u = cond + delta if target == "residual" else delta
    return u
