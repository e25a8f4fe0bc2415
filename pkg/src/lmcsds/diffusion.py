"""Variance schedule, forward process, conditional denoiser, training and sampling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import Checkpoint, LabeledDataset
from .errors import DivergenceError, ValidationError
from .nets import (
    FREQ_DIM,
    UNet,
    UNetConfig,
    as_batch,
    broadcast_scalar,
    frequency_encoding,
    load_module_state,
    module_to_checkpoint,
    seeded_init,
    to_torch,
)

log = logging.getLogger(__name__)

NULL_LABEL = -1
ALPHA_BAR_MIN = 1e-4
ALPHA_BAR_MAX = 1.0 - 1e-4


class VarianceSchedule:
    """alpha_bar(t) on [0, 1], linearly interpolated between evenly spaced knots."""

    def __init__(self, knots: np.ndarray, name: str = "custom"):
        knots = np.asarray(knots, dtype=np.float64)
        if knots.ndim != 1 or len(knots) < 2:
            raise ValidationError("schedule needs at least two knots")
        self.knots = knots
        self.grid = np.linspace(0.0, 1.0, len(knots))
        self.name = name

    def alpha_bar(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0) | (t > 1)):
            raise ValidationError("t must lie in [0, 1]")
        return np.interp(t, self.grid, self.knots)

    __call__ = alpha_bar

    def to_dict(self) -> dict:
        return {"name": self.name, "knots": len(self.knots)}


def cosine_alpha_bar(t, s: float = 0.008):
    """Unclamped cosine closed form."""
    t = np.asarray(t, dtype=np.float64)
    f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
    return f / math.cos(s / (1 + s) * math.pi / 2) ** 2


def make_cosine_schedule(knots: int = 1000, s: float = 0.008) -> VarianceSchedule:
    if knots < 16:
        raise ValidationError("knots must be >= 16")
    values = cosine_alpha_bar(np.linspace(0.0, 1.0, knots), s)
    return VarianceSchedule(np.clip(values, ALPHA_BAR_MIN, ALPHA_BAR_MAX), name="cosine")


def schedule_from_dict(d: dict) -> VarianceSchedule:
    if d.get("name") != "cosine":
        raise ValidationError(f"unknown schedule {d.get('name')!r}")
    return make_cosine_schedule(int(d["knots"]))


def _expand(a, ndim: int):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (ndim - a.ndim)) if a.ndim else a


def diffuse(z, eps, alpha_bar):
    """sqrt(a) z + sqrt(1 - a) eps with a broadcast over leading axes."""
    z = np.asarray(z, dtype=np.float64)
    a = _expand(alpha_bar, z.ndim)
    return np.sqrt(a) * z + np.sqrt(1.0 - a) * np.asarray(eps, dtype=np.float64)


def x0_from_eps(z_t, eps_hat, alpha_bar):
    z_t = np.asarray(z_t, dtype=np.float64)
    a = _expand(alpha_bar, z_t.ndim)
    return (z_t - np.sqrt(1.0 - a) * np.asarray(eps_hat, dtype=np.float64)) / np.sqrt(a)


def eps_from_x0(z_t, x0, alpha_bar):
    z_t = np.asarray(z_t, dtype=np.float64)
    a = _expand(alpha_bar, z_t.ndim)
    return (z_t - np.sqrt(a) * np.asarray(x0, dtype=np.float64)) / np.sqrt(1.0 - a)


def forward_diffuse(z, t, eps, sched: VarianceSchedule):
    z, eps = np.asarray(z), np.asarray(eps)
    if z.shape != eps.shape:
        raise ValidationError(f"shape mismatch: z {z.shape} vs eps {eps.shape}")
    return diffuse(z, eps, sched.alpha_bar(t))


def cfg_combine(eps_cond, eps_uncond, omega: float):
    """Guided noise ``omega * cond + (1 - omega) * uncond``."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValidationError("cond/uncond shapes differ")
    return omega * eps_cond + (1.0 - omega) * eps_uncond


def cfg_combine_delta(eps_cond, eps_uncond, omega: float):
    """Same combination written as a guidance delta on top of the unconditional branch."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    return omega * (eps_cond - eps_uncond) + eps_uncond


# --------------------------------------------------------------------------
# network


class DenoiserNet(nn.Module):
    """Noise predictor with class embedding; index ``num_classes`` is the null label."""

    def __init__(self, num_classes: int, unet: UNetConfig, embed_dim: int = 64):
        super().__init__()
        self.num_classes = num_classes
        unet.embed_dim = embed_dim
        self.unet = UNet(unet)
        self.label_embed = nn.Embedding(num_classes + 1, embed_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(FREQ_DIM, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim)
        )

    def forward(self, z_t: torch.Tensor, label_index: torch.Tensor, t: torch.Tensor):
        tf = frequency_encoding(t)
        emb = self.time_mlp(tf) + self.label_embed(label_index)
        return self.unet(z_t, tf, emb)


@dataclass
class DenoiserArch:
    channels: int = 1
    base: int = 16
    levels: int = 3
    embed_dim: int = 64


class Denoiser:
    """A trained (or freshly initialised) noise-prediction model plus its schedule.

    Inputs and outputs are numpy arrays; ``y`` is an int, ``None`` / ``NULL_LABEL``
    for the unconditional branch, or one label per batch element.
    """

    def __init__(self, net: DenoiserNet, schedule: VarianceSchedule, arch: DenoiserArch):
        self.net = net.eval()
        self.schedule = schedule
        self.arch = arch

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    @classmethod
    def create(cls, num_classes: int, schedule: VarianceSchedule,
               arch: DenoiserArch | None = None, seed: int = 0) -> "Denoiser":
        arch = arch or DenoiserArch()
        unet = UNetConfig(in_channels=arch.channels, out_channels=arch.channels,
                          base=arch.base, levels=arch.levels, act="silu")
        net = seeded_init(lambda: DenoiserNet(num_classes, unet, arch.embed_dim), seed)
        return cls(net, schedule, arch)

    def label_index(self, y, n: int) -> torch.Tensor:
        if y is None:
            y = NULL_LABEL
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
        if np.any(y >= self.num_classes) or np.any(y < NULL_LABEL):
            raise ValidationError(f"label outside [0, {self.num_classes}) or null")
        return torch.from_numpy(np.where(y == NULL_LABEL, self.num_classes, y))

    @torch.no_grad()
    def predict_noise(self, z_t, y, t) -> np.ndarray:
        zb, single = as_batch(z_t)
        n = len(zb)
        out = self.net(to_torch(zb), self.label_index(y, n), broadcast_scalar(t, n))
        out = out.numpy().astype(np.float64)
        return out[0] if single else out

    def predict_x0(self, z_t, y, t) -> np.ndarray:
        eps_hat = self.predict_noise(z_t, y, t)
        a = self.schedule.alpha_bar(t)
        if np.ndim(a) and np.ndim(z_t) == 3:
            a = np.asarray(a).reshape(())
        return x0_from_eps(z_t, eps_hat, a)

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        meta = {
            "kind": "denoiser",
            "num_classes": self.num_classes,
            "arch": asdict(self.arch),
            "schedule": self.schedule.to_dict(),
        }
        meta.update(extra or {})
        return module_to_checkpoint(self.net, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Denoiser":
        meta = ckpt.metadata
        if meta.get("kind") != "denoiser":
            raise ValidationError("checkpoint does not hold a denoiser")
        d = cls.create(int(meta["num_classes"]), schedule_from_dict(meta["schedule"]),
                       DenoiserArch(**meta["arch"]))
        load_module_state(d.net, ckpt)
        return d


def predict_noise(d: Denoiser, z_t, y, t) -> np.ndarray:
    return d.predict_noise(z_t, y, t)


def predict_x0(d: Denoiser, z_t, y, t) -> np.ndarray:
    return d.predict_x0(z_t, y, t)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 5e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 8000
    batch_size: int = 16
    steps: int = 20000
    label_dropout: float = 0.1
    t_range: tuple[float, float] = (0.02, 0.98)
    weighting: str = "unit"
    seed: int = 0
    log_every: int = 200
    arch: DenoiserArch = field(default_factory=DenoiserArch)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = DenoiserArch(**self.arch)
        self.t_range = tuple(self.t_range)
        if self.weighting not in ("unit", "snr"):
            raise ValidationError(f"unknown weighting {self.weighting!r}")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValidationError("label_dropout must lie in [0, 1)")


@dataclass
class TraceRow:
    step: int
    loss: float
    bucket_losses: tuple[float, float, float]


def _loss_weight(kind: str, alpha_bar: np.ndarray) -> np.ndarray:
    if kind == "unit":
        return np.ones_like(alpha_bar)
    return np.minimum(alpha_bar / (1.0 - alpha_bar), 5.0)


def _bucket_means(t: np.ndarray, per: np.ndarray) -> list[list[float]]:
    b = np.minimum((t * 3).astype(int), 2)
    return [per[b == i].tolist() for i in range(3)]


def train_denoiser(data: LabeledDataset, sched: VarianceSchedule,
                   cfg: TrainConfig) -> tuple[Denoiser, list[TraceRow]]:
    if len(data) == 0:
        raise ValidationError("empty dataset")
    arch = DenoiserArch(**{**asdict(cfg.arch), "channels": data.images.shape[1]})
    d = Denoiser.create(data.num_classes, sched, arch, seed=cfg.seed)
    if cfg.steps == 0:
        return d, []
    net = d.net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    decay = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay)
    rng = np.random.default_rng(cfg.seed)
    images = data.images
    trace: list[TraceRow] = []
    window, buckets = [], [[], [], []]
    lo, hi = cfg.t_range
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), cfg.batch_size)
        t = rng.uniform(lo, hi, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + images.shape[1:])
        drop = rng.random(cfg.batch_size) < cfg.label_dropout
        labels = np.where(drop, data.num_classes, data.labels[idx])
        a = sched.alpha_bar(t)
        z_t = diffuse(images[idx], eps, a)
        pred = net(to_torch(z_t), torch.from_numpy(labels), to_torch(t))
        per = ((pred - to_torch(eps)) ** 2).mean(dim=(1, 2, 3))
        loss = (to_torch(_loss_weight(cfg.weighting, a)) * per).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(f"denoiser loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        decay.step()
        window.append(loss.item())
        for i, vals in enumerate(_bucket_means(t, per.detach().numpy())):
            buckets[i].extend(vals)
        if step % cfg.log_every == 0 or step == cfg.steps:
            row = TraceRow(step, float(np.mean(window)),
                           tuple(float(np.mean(b)) if b else float("nan") for b in buckets))
            trace.append(row)
            log.info("denoiser step %d loss %.4f", step, row.loss)
            window, buckets = [], [[], [], []]
    d.net.eval()
    return d, trace


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "loss_t_low", "loss_t_mid", "loss_t_high"])
        for row in trace:
            w.writerow([row.step, f"{row.loss:.6g}", *(f"{b:.6g}" for b in row.bucket_losses)])


def diffusion_loss(d: Denoiser, data: LabeledDataset, seed: int = 0, draws: int = 1,
                   conditional: bool = True, t_range=(0.02, 0.98),
                   batch_size: int = 256) -> float:
    """Mean unit-weighted diffusion loss under draws fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    n = len(data)
    losses = []
    for _ in range(draws):
        t = rng.uniform(*t_range, n)
        eps = rng.standard_normal(data.images.shape)
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            z_t = diffuse(data.images[sl], eps[sl], d.schedule.alpha_bar(t[sl]))
            y = data.labels[sl] if conditional else None
            pred = d.predict_noise(z_t, y, t[sl])
            losses.append(((pred - eps[sl]) ** 2).mean(axis=(1, 2, 3)))
    return float(np.concatenate(losses).mean())


# --------------------------------------------------------------------------
# sampling


def sample(d: Denoiser, y, steps: int = 50, mode: str = "ddim", seed: int = 0,
           omega: float = 1.0, n: int | None = None, image_shape=None,
           clip: bool = True) -> np.ndarray:
    """Reverse process over a uniform grid from t=1 to t=0.

    The last step returns the clean-image prediction. ``y`` may be a single
    label (broadcast over ``n`` samples) or one label per sample.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if mode not in ("ddim", "ancestral"):
        raise ValidationError(f"unknown sampling mode {mode!r}")
    y_arr = np.atleast_1d(np.asarray(NULL_LABEL if y is None else y, dtype=np.int64))
    if n is None:
        n = len(y_arr)
    y_arr = np.broadcast_to(y_arr, (n,))
    shape = image_shape or (d.arch.channels, 32, 32)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n,) + tuple(shape))
    grid = np.linspace(1.0, 0.0, steps + 1)
    x0 = z
    for t, s in zip(grid[:-1], grid[1:]):
        a_t = float(d.schedule.alpha_bar(t))
        eps = d.predict_noise(z, y_arr, t)
        if omega != 1.0:
            eps = cfg_combine(eps, d.predict_noise(z, None, t), omega)
        x0 = x0_from_eps(z, eps, a_t)
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
            eps = eps_from_x0(z, x0, a_t)
        if s == 0.0:
            break
        a_s = float(d.schedule.alpha_bar(s))
        if mode == "ddim":
            z = math.sqrt(a_s) * x0 + math.sqrt(1.0 - a_s) * eps
        else:
            ratio = a_t / a_s
            var = (1.0 - a_s) / (1.0 - a_t) * (1.0 - ratio)
            mean = (math.sqrt(a_s) * (1.0 - ratio) / (1.0 - a_t)) * x0 + (
                math.sqrt(ratio) * (1.0 - a_s) / (1.0 - a_t)) * z
            z = mean + math.sqrt(max(var, 0.0)) * rng.standard_normal(z.shape)
    return x0
