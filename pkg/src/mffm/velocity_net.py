"""Per-level velocity network: residual conv blocks with FiLM time conditioning.

Layout: 3x3 lift of the concatenated (state, conditioning) channels, a first
stack of residual blocks, a second stack that adds the first stack's outputs
as mirrored skips, then GroupNorm -> SiLU -> zero-initialized 1x1 head. No
spatial resampling happens inside the network.

``n_blocks`` counts residual blocks over both stacks: the first stack gets
``ceil(n_blocks / 2)``, the second ``floor(n_blocks / 2)``. Second-stack block ``j`` (0-based) adds the output
of first-stack block ``len(first) - 1 - j`` to its input, U-Net style.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensor_core import DimensionError

GROUPNORM_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    channels: int = 1
    hidden: int = 32
    n_blocks: int = 2
    n_groups: int = 8
    time_embed_dim: int = 64
    padding: str = "reflect"

    def __post_init__(self):
        if self.hidden < 32 or self.hidden % 8:
            raise ValueError("hidden width must be >= 32 and a multiple of 8")
        if self.n_blocks < 2:
            raise ValueError("need at least two residual blocks")
        if not 1 <= self.n_groups <= 8 or self.hidden % self.n_groups:
            raise ValueError("n_groups must be <= 8 and divide the hidden width")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.padding not in ("reflect", "circular"):
            raise ValueError(f"unsupported padding {self.padding!r}")

    @classmethod
    def sized(cls, channels: int, hidden: int, n_blocks: int, **kw) -> "NetConfig":
        """Round ``hidden`` up to a valid width and pick the largest group count <= 8."""
        hidden = max(32, 8 * math.ceil(hidden / 8))
        groups = max(g for g in range(1, 9) if hidden % g == 0)
        return cls(channels=channels, hidden=hidden, n_blocks=max(2, n_blocks), n_groups=groups, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_time_embedding(t, dim: int) -> torch.Tensor:
    """``[sin(w_k t), cos(w_k t)]`` with ``w_k`` geometric from 1 to 1e4."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.logspace(0.0, 4.0, half, dtype=torch.float64) if half > 1 else torch.ones(1, dtype=torch.float64)
    arg = t[..., None] * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        h = cfg.hidden
        self.norm1 = nn.GroupNorm(cfg.n_groups, h, eps=GROUPNORM_EPS)
        self.conv1 = nn.Conv2d(h, h, 3, padding=1, padding_mode=cfg.padding)
        self.film = nn.Linear(h, 2 * h)
        self.norm2 = nn.GroupNorm(cfg.n_groups, h, eps=GROUPNORM_EPS)
        self.conv2 = nn.Conv2d(h, h, 3, padding=1, padding_mode=cfg.padding)

    def forward(self, x, temb):
        y = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(F.silu(temb)).chunk(2, dim=-1)
        y = y * (1 + scale[..., None, None]) + shift[..., None, None]
        y = self.conv2(F.silu(self.norm2(y)))
        return x + y


class VelocityNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_embed_dim, h), nn.SiLU(), nn.Linear(h, h))
        self.lift = nn.Conv2d(2 * cfg.channels, h, 3, padding=1, padding_mode=cfg.padding)
        n_up = cfg.n_blocks // 2
        self.down = nn.ModuleList(ResBlock(cfg) for _ in range(cfg.n_blocks - n_up))
        self.up = nn.ModuleList(ResBlock(cfg) for _ in range(n_up))
        self.head_norm = nn.GroupNorm(cfg.n_groups, h, eps=GROUPNORM_EPS)
        self.head = nn.Conv2d(h, cfg.channels, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, delta_t: torch.Tensor, t, conditioning: torch.Tensor) -> torch.Tensor:
        if delta_t.shape != conditioning.shape:
            raise DimensionError(f"state {tuple(delta_t.shape)} vs conditioning {tuple(conditioning.shape)}")
        if delta_t.shape[-3] != self.cfg.channels:
            raise DimensionError(f"expected {self.cfg.channels} channels, got {delta_t.shape[-3]}")
        t = torch.as_tensor(t, dtype=delta_t.dtype)
        if t.ndim == 0:
            t = t.expand(delta_t.shape[0])
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.cfg.time_embed_dim).to(delta_t.dtype))
        x = self.lift(torch.cat([delta_t, conditioning], dim=1))
        skips = []
        for blk in self.down:
            x = blk(x, temb)
            skips.append(x)
        for blk in self.up:
            x = blk(x + skips.pop(), temb)
        return self.head(F.silu(self.head_norm(x)))


def build_net(cfg: NetConfig, seed: int, dtype=torch.float64) -> VelocityNet:
    """Freshly initialized network; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = VelocityNet(cfg)
    return net.to(dtype)


def n_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def mse_loss(net: VelocityNet, delta_t, t, conditioning, target) -> torch.Tensor:
    """Mean squared error over batch and coordinates."""
    return F.mse_loss(net(delta_t, t, conditioning), target)


def loss_and_gradients(net: VelocityNet, delta_t, t, conditioning, target):
    """Flow-matching regression loss and its exact gradient for every parameter."""
    net.zero_grad(set_to_none=True)
    loss = mse_loss(net, delta_t, t, conditioning, target)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in net.named_parameters()}
    return float(loss.detach()), grads


def state_arrays(net: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters as numpy arrays (native dtype) keyed ``prefix + name``."""
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def load_state_arrays(net: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    ref = net.state_dict()
    state = {}
    for k, v in ref.items():
        state[k] = torch.as_tensor(np.asarray(arrays[prefix + k]), dtype=v.dtype).reshape(v.shape)
    net.load_state_dict(state)
