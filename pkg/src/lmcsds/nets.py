"""U-Net backbone, frequency encoding and torch/checkpoint plumbing."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Checkpoint

FREQ_DIM = 10


def configure_torch() -> None:
    """Single deterministic CPU stream; ``LMC_THREADS`` caps intra-op threads."""
    threads = int(os.environ.get("LMC_THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


configure_torch()


def frequency_encoding(x: torch.Tensor, dim: int = FREQ_DIM) -> torch.Tensor:
    """``[sin(2^k pi x), cos(2^k pi x)]`` for k < dim/2; input (N,) -> (N, dim)."""
    k = torch.arange(dim // 2, dtype=x.dtype, device=x.device)
    arg = x[:, None] * (np.pi * 2.0 ** k)
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


def broadcast_scalar(x, n: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 0:
        t = t.expand(n)
    if t.shape != (n,):
        raise ValueError(f"expected a scalar or {n} values, got shape {tuple(t.shape)}")
    return t


@dataclass
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base: int = 16
    levels: int = 3
    extra_channels: int = FREQ_DIM
    embed_dim: int = 0
    act: str = "silu"
    out_act: str = "none"


class _Level(nn.Module):
    def __init__(self, cin: int, cout: int, embed_dim: int, act: str):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.film = nn.Linear(embed_dim, cout) if embed_dim else None
        self.act = nn.SiLU() if act == "silu" else nn.ReLU()

    def forward(self, x, emb=None):
        h = self.conv1(x)
        if self.film is not None:
            h = h + self.film(emb)[:, :, None, None]
        return self.act(self.conv2(self.act(h)))


class UNet(nn.Module):
    """Encoder/decoder with max-pool downsampling and skip concatenation.

    Per-pixel side information (``extra``, e.g. a frequency-encoded scalar) is
    concatenated to the input; an optional embedding vector adds a per-channel
    bias inside every level.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base * 2 ** i for i in range(cfg.levels)]
        cin = cfg.in_channels + cfg.extra_channels
        self.down = nn.ModuleList()
        for w in widths:
            self.down.append(_Level(cin, w, cfg.embed_dim, cfg.act))
            cin = w
        self.up = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(_Level(cin + w, w, cfg.embed_dim, cfg.act))
            cin = w
        self.head = nn.Conv2d(cin, cfg.out_channels, 1)
        self.to(memory_format=torch.channels_last)

    def forward(self, x, extra=None, emb=None):
        if extra is not None:
            x = torch.cat([x, extra[:, :, None, None].expand(-1, -1, *x.shape[2:])], dim=1)
        x = x.contiguous(memory_format=torch.channels_last)
        skips = []
        for i, level in enumerate(self.down):
            x = level(x, emb)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for level in self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = level(torch.cat([x, skips.pop()], dim=1), emb)
        out = self.head(x).contiguous()
        return torch.tanh(out) if self.cfg.out_act == "tanh" else out


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def module_to_checkpoint(module: nn.Module, metadata: dict) -> Checkpoint:
    tensors = {k: v.detach().cpu().numpy().astype(np.float32)
               for k, v in module.state_dict().items()}
    return Checkpoint(tensors, metadata)


def load_module_state(module: nn.Module, ckpt: Checkpoint) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.tensors.items()}
    module.load_state_dict(state)


def unet_config_dict(cfg: UNetConfig) -> dict:
    return asdict(cfg)


def to_torch(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def as_batch(z) -> tuple[np.ndarray, bool]:
    """Promote a single (C, H, W) image to a batch; report whether it was single."""
    z = np.asarray(z)
    if z.ndim == 3:
        return z[None], True
    if z.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {z.shape}")
    return z, False


def seeded_init(module_factory, seed: int):
    """Build a module under a private torch generator state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return module_factory()
