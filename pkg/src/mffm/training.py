"""Level-wise flow-matching pretraining and end-to-end cascade fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .cascade import CascadeModel, predict_deterministic, rollout_torch, sample_stochastic_ensemble
from .source import ResidualStats, SourceSpec, compute_residual_stats, sample_source
from .tensor_core import mean_nrmse, prolong_bilinear
from .velocity_net import NetConfig, VelocityNet, build_net, mse_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    ema_decay: float = 0.999
    batch_size: int = 32
    epochs_pretrain: int = 200
    epochs_e2e: int = 100
    e2e_lr_factor: float = 0.2
    eps_e2e: float = 1e-8
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if min(self.lr, self.weight_decay + 1e-300, self.clip_norm, self.e2e_lr_factor) <= 0:
            raise ValueError("rates, clip_norm and e2e_lr_factor must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``; no warmup."""
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = float(torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)))
    if norm > max_norm:
        for g in grads:
            g.mul_(max_norm / norm)
    return norm


class Ema:
    """Exponential moving average of a module's parameters and buffers."""

    def __init__(self, net: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in net.state_dict().items()}

    @torch.no_grad()
    def update(self, net: torch.nn.Module) -> None:
        for k, v in net.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)

    def apply_to(self, net: torch.nn.Module) -> None:
        net.load_state_dict(self.shadow)


def make_optimizer(net: torch.nn.Module, cfg: TrainConfig, lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(net.parameters(), lr=lr, betas=(cfg.beta1, cfg.beta2),
                             eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def optimizer_step(net, opt, loss: torch.Tensor, cfg: TrainConfig, lr: float) -> float:
    """Backprop, clip, AdamW step at ``lr``. Returns the pre-clip gradient norm."""
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss)} at lr={lr:g}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for g in opt.param_groups for p in g["params"]]
    norm = clip_grad_norm(params, cfg.clip_norm)
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm (loss {float(loss):.4g})")
    _set_lr(opt, lr)
    opt.step()
    return norm


def fm_train_step(net: VelocityNet, ema: Ema | None, opt, cond: np.ndarray, residual: np.ndarray,
                  stats: ResidualStats, spec: SourceSpec, rng: np.random.Generator,
                  cfg: TrainConfig, lr: float) -> float:
    """One flow-matching step on a minibatch of (prolonged conditioning, residual) pairs."""
    b = residual.shape[0]
    eps = sample_source(stats, spec, rng, n_samples=b)
    t = rng.random(b)
    tb = t[:, None, None, None]
    delta_t = tb * residual + (1.0 - tb) * eps
    dt = cfg.torch_dtype
    loss = mse_loss(net, torch.as_tensor(delta_t, dtype=dt), torch.as_tensor(t, dtype=dt),
                    torch.as_tensor(cond, dtype=dt), torch.as_tensor(residual - eps, dtype=dt))
    optimizer_step(net, opt, loss, cfg, lr)
    if ema is not None:
        ema.update(net)
    return float(loss.detach())


def level_pairs(coarse: np.ndarray, fine: np.ndarray, target: str = "residual"):
    """(prolonged conditioning, regression target) for one level."""
    cond = prolong_bilinear(coarse, fine.shape[-1])
    return cond, (fine - cond if target == "residual" else fine.astype(np.float64))


def _n_batches(n: int, b: int) -> int:
    return math.ceil(n / b)


def pretrain_level(level: int, cond, target, cfg: TrainConfig, net_cfg: NetConfig,
                   spec: SourceSpec, history: list | None = None, seed_offset: int = 0):
    """Flow-matching pretraining of one level on ground-truth conditioning.

    ``cond``/``target`` may be single arrays or lists of arrays at different
    resolutions (pooled multi-resolution training); minibatches never mix
    resolutions. Returns ``(net with EMA weights applied, stats)`` where stats
    is one ResidualStats per resolution group (a single object if one group).
    """
    groups_c = cond if isinstance(cond, list) else [cond]
    groups_t = target if isinstance(target, list) else [target]
    stats = [compute_residual_stats(t, level) for t in groups_t]
    net = build_net(net_cfg, seed=cfg.seed * 1000 + 17 * level + seed_offset, dtype=cfg.torch_dtype)
    ema = Ema(net, cfg.ema_decay)
    opt = make_optimizer(net, cfg, cfg.lr)
    per_epoch = sum(_n_batches(len(t), cfg.batch_size) for t in groups_t)
    total = cfg.epochs_pretrain * per_epoch
    step = 0
    for epoch in range(cfg.epochs_pretrain):
        rng = np.random.default_rng([cfg.seed, level, seed_offset, epoch])
        batches = []
        for g, t in enumerate(groups_t):
            perm = rng.permutation(len(t))
            batches += [(g, perm[i:i + cfg.batch_size]) for i in range(0, len(t), cfg.batch_size)]
        order = rng.permutation(len(batches))
        losses = []
        for j in order:
            g, idx = batches[j]
            lr = cosine_lr(step, total, cfg.lr)
            losses.append(fm_train_step(net, ema, opt, groups_c[g][idx], groups_t[g][idx],
                                        stats[g], spec, rng, cfg, lr))
            step += 1
        if history is not None:
            history.append({"stage": f"pretrain_l{level}", "epoch": epoch + 1,
                            "train_loss": float(np.mean(losses)), "val_nrmse": float("nan"),
                            "lr": cosine_lr(step, total, cfg.lr)})
    ema.apply_to(net)
    return net, stats[0] if len(stats) == 1 else stats


def pretrain_cascade(levels, cfg: TrainConfig, net_cfgs, specs, target: str = "residual",
                     history: list | None = None):
    """Pretrain every level of ``levels`` (a list of per-resolution sample stacks)."""
    nets, stats = [], []
    for level in range(len(levels) - 1):
        c, t = level_pairs(levels[level], levels[level + 1], target)
        net, st = pretrain_level(level, c, t, cfg, net_cfgs[level], specs[level], history)
        nets.append(net)
        stats.append(st)
        log.info("pretrained level %d", level)
    return nets, stats


def _relative_l2_batch(pred: torch.Tensor, truth: torch.Tensor, eps: float) -> torch.Tensor:
    diff = (pred - truth).flatten(1).norm(dim=1)
    return diff / (truth.flatten(1).norm(dim=1) + eps)


def e2e_loss(nets, u0: torch.Tensor, uL: torch.Tensor, resolutions, target: str = "residual",
             eps: float = 1e-8, sources=None) -> torch.Tensor:
    """Batch-mean relative L2 error of the unrolled one-step cascade."""
    return _relative_l2_batch(rollout_torch(nets, u0, resolutions, target, sources=sources), uL, eps).mean()


def evaluate(model: CascadeModel, u0, truth) -> float:
    return mean_nrmse(predict_deterministic(model, u0), truth)


def _finetune(model: CascadeModel, u0_train, uL_train, u0_val, uL_val, cfg: TrainConfig,
              history: list | None, stage: str, loss_fn, val_fn) -> CascadeModel:
    model = copy.deepcopy(model)
    if cfg.epochs_e2e == 0:
        model.selected = {"epoch": 0, "val_nrmse": val_fn(model, u0_val, uL_val)}
        return model
    params = [p for net in model.nets for p in net.parameters()]
    base = cfg.lr * cfg.e2e_lr_factor
    opt = torch.optim.AdamW(params, lr=base, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay)
    dt = cfg.torch_dtype
    n = len(u0_train)
    total = cfg.epochs_e2e * _n_batches(n, cfg.batch_size)
    best_val = val_fn(model, u0_val, uL_val)
    best_state = [copy.deepcopy(net.state_dict()) for net in model.nets]
    best_epoch = 0
    if history is not None:
        history.append({"stage": stage, "epoch": 0, "train_loss": float("nan"),
                        "val_nrmse": best_val, "lr": base})
    step = 0
    for epoch in range(cfg.epochs_e2e):
        rng = np.random.default_rng([cfg.seed, 7919, epoch])
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = loss_fn(model, torch.as_tensor(u0_train[idx], dtype=dt),
                           torch.as_tensor(uL_train[idx], dtype=dt), rng)
            optimizer_step(None, opt, loss, cfg, cosine_lr(step, total, base))
            losses.append(float(loss.detach()))
            step += 1
        val = val_fn(model, u0_val, uL_val)
        if history is not None:
            history.append({"stage": stage, "epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                            "val_nrmse": val, "lr": cosine_lr(step, total, base)})
        if val < best_val:
            best_val, best_epoch = val, epoch + 1
            best_state = [copy.deepcopy(net.state_dict()) for net in model.nets]
    for net, state in zip(model.nets, best_state):
        net.load_state_dict(state)
    log.info("%s: best validation NRMSE %.5g at epoch %d", stage, best_val, best_epoch)
    model.selected = {"epoch": best_epoch, "val_nrmse": best_val}
    return model


def e2e_finetune(model: CascadeModel, u0_train, uL_train, u0_val, uL_val, cfg: TrainConfig,
                 history: list | None = None) -> CascadeModel:
    """Joint training of all levels through the deterministic one-step rollout.

    Returns a copy holding the epoch (including the starting point) with the
    lowest validation NRMSE.
    """
    res = model.hierarchy.resolutions

    def loss_fn(m, u0, uL, rng):
        return e2e_loss(m.nets, u0, uL, res, m.target, cfg.eps_e2e)

    return _finetune(model, u0_train, uL_train, u0_val, uL_val, cfg, history, "e2e", loss_fn, evaluate)


def stochastic_e2e_finetune(model: CascadeModel, u0_train, uL_train, u0_val, uL_val, cfg: TrainConfig,
                            k_train: int = 4, k_val: int = 8, history: list | None = None) -> CascadeModel:
    """Fine-tune on the Monte-Carlo mean relative error of ``k_train`` source-initialized rollouts.

    Validation uses the NRMSE of the mean of ``k_val`` stochastic rollouts.
    """
    res = model.hierarchy.resolutions
    dt = cfg.torch_dtype

    def loss_fn(m, u0, uL, rng):
        total = 0.0
        b = u0.shape[0]
        for _ in range(k_train):
            eps = [torch.as_tensor(sample_source(m.stats[l], m.sources[l], rng, n_samples=b), dtype=dt)
                   for l in range(m.n_levels)]
            total = total + e2e_loss(m.nets, u0, uL, res, m.target, cfg.eps_e2e, sources=eps)
        return total / k_train

    def val_fn(m, u0, uL):
        ens = sample_stochastic_ensemble(m, u0, k_val, seed=cfg.seed)
        return mean_nrmse(ens.mean, uL)

    return _finetune(model, u0_train, uL_train, u0_val, uL_val, cfg, history, "stochastic_e2e",
                     loss_fn, val_fn)
