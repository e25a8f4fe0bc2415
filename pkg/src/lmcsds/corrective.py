"""Learned model of the denoiser's timestep-dependent bias.

The network maps a clean image ``z`` and timestep ``t`` to the average
single-step reconstruction the denoiser would produce for it. Its loss and
its inference output are both taken after matching global image statistics
to the reconstruction being compared against.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np
import torch

from .data import Checkpoint, LabeledDataset
from .diffusion import Denoiser, diffuse, x0_from_eps
from .errors import DegenerateInputError, DivergenceError, ValidationError
from .nets import (
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

SIGMA_FLOOR = 1e-8
MEAN_MODES = ("own", "ref")


class Triplet(NamedTuple):
    z: np.ndarray
    xhat: np.ndarray
    t: float


def _moments(x: np.ndarray):
    axes = tuple(range(1, x.ndim))
    return x.mean(axis=axes, keepdims=True), x.std(axis=axes, keepdims=True)


def stat_normalize(pred, ref, mean_mode: str = "own") -> np.ndarray:
    """Rescale ``pred`` to the standard deviation of ``ref``.

    Statistics are per image, over all pixels and channels. ``mean_mode="own"``
    keeps the prediction's mean, ``"ref"`` moves it to the reference mean.
    """
    if mean_mode not in MEAN_MODES:
        raise ValidationError(f"mean_mode must be one of {MEAN_MODES}")
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {ref.shape}")
    pb, single = as_batch(pred)
    rb, _ = as_batch(ref)
    mu_p, sd_p = _moments(pb)
    mu_r, sd_r = _moments(rb)
    if np.any(sd_p <= SIGMA_FLOOR):
        raise DegenerateInputError("prediction has (near) zero standard deviation")
    # written as a correction to pred so that pred == ref maps to ref exactly
    out = pb + (sd_r / sd_p - 1.0) * (pb - mu_p)
    if mean_mode == "ref":
        out = out + (mu_r - mu_p)
    return out[0] if single else out


def _stat_normalize_torch(pred: torch.Tensor, ref: torch.Tensor, mean_mode: str):
    dims = (1, 2, 3)
    mu_p = pred.mean(dim=dims, keepdim=True)
    sd_p = pred.std(dim=dims, keepdim=True, unbiased=False).clamp_min(SIGMA_FLOOR)
    sd_r = ref.std(dim=dims, keepdim=True, unbiased=False)
    shift = mu_p if mean_mode == "own" else ref.mean(dim=dims, keepdim=True)
    return sd_r / sd_p * (pred - mu_p) + shift


def normalized_loss(pred, ref, mean_mode: str = "own") -> np.ndarray:
    """Per-image mean squared error between ``ref`` and the normalised ``pred``."""
    ref_b, _ = as_batch(np.asarray(ref, dtype=np.float64))
    diff = ref_b - as_batch(stat_normalize(pred, ref, mean_mode))[0]
    return (diff ** 2).mean(axis=(1, 2, 3))


# --------------------------------------------------------------------------
# triplets


class TripletStream:
    """Fresh ``(z, xhat, t)`` batches: dataset image, unconditional one-step
    reconstruction of its noised version, and the timestep used."""

    def __init__(self, denoiser: Denoiser, data: LabeledDataset, seed: int = 0,
                 t_range=(0.02, 0.98)):
        if len(data) == 0:
            raise ValidationError("empty dataset")
        self.denoiser = denoiser
        self.data = data
        self.rng = np.random.default_rng(seed)
        self.t_range = tuple(t_range)

    def next_batch(self, n: int, t=None):
        idx = self.rng.integers(0, len(self.data), n)
        if t is None:
            t = self.rng.uniform(*self.t_range, n)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
        z = self.data.images[idx].astype(np.float64)
        eps = self.rng.standard_normal(z.shape)
        a = self.denoiser.schedule.alpha_bar(t)
        z_t = diffuse(z, eps, a)
        xhat = x0_from_eps(z_t, self.denoiser.predict_noise(z_t, None, t), a)
        return z, xhat, t


class TripletCache:
    """Pre-generated triplets, sampled with replacement."""

    def __init__(self, z, xhat, t, seed: int = 0):
        self.z = np.asarray(z, dtype=np.float64)
        self.xhat = np.asarray(xhat, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        if not len(self.z) == len(self.xhat) == len(self.t) or len(self.t) == 0:
            raise ValidationError("triplet cache arrays must be non-empty and aligned")
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def build(cls, stream: TripletStream, n: int, chunk: int = 256) -> "TripletCache":
        parts = [stream.next_batch(min(chunk, n - s)) for s in range(0, n, chunk)]
        return cls(*(np.concatenate(p) for p in zip(*parts)))

    def next_batch(self, n: int):
        idx = self.rng.integers(0, len(self), n)
        return self.z[idx], self.xhat[idx], self.t[idx]

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            {"z": self.z.astype(np.float32), "xhat": self.xhat.astype(np.float32),
             "t": self.t.astype(np.float32)},
            {"kind": "triplets", "count": len(self)},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, seed: int = 0) -> "TripletCache":
        if ckpt.metadata.get("kind") != "triplets":
            raise ValidationError("checkpoint does not hold triplets")
        return cls(ckpt.tensors["z"], ckpt.tensors["xhat"], ckpt.tensors["t"], seed)


def generate_triplets(d: Denoiser, data: LabeledDataset, n: int, seed: int = 0,
                      chunk: int = 256) -> Iterator[Triplet]:
    """Yield ``n`` triplets with independent (image, t, noise) draws."""
    if n <= 0:
        return
    stream = TripletStream(d, data, seed)
    done = 0
    while done < n:
        z, xhat, t = stream.next_batch(min(chunk, n - done))
        for i in range(len(t)):
            yield Triplet(z[i], xhat[i], float(t[i]))
        done += len(t)


# --------------------------------------------------------------------------
# network


@dataclass
class CorrectiveConfig:
    steps: int = 12000
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 2000
    mean_mode: str = "own"
    base: int = 8
    levels: int = 3
    seed: int = 0
    log_every: int = 500
    eval_every: int = 0
    patience: int = 0
    min_steps: int = 0
    plateau_tol: float = 1e-3

    def __post_init__(self):
        if self.mean_mode not in MEAN_MODES:
            raise ValidationError(f"mean_mode must be one of {MEAN_MODES}")


class CorrectiveNet:
    """Wrapper holding the bias network and the normalisation mode used with it."""

    def __init__(self, net: UNet, mean_mode: str = "own"):
        self.net = net.eval()
        self.mean_mode = mean_mode

    @classmethod
    def create(cls, channels: int = 1, base: int = 8, levels: int = 3,
               mean_mode: str = "own", seed: int = 0) -> "CorrectiveNet":
        ucfg = UNetConfig(in_channels=channels, out_channels=channels, base=base,
                          levels=levels, act="relu", out_act="tanh")
        return cls(seeded_init(lambda: UNet(ucfg), seed), mean_mode)

    def forward_torch(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.net(z, frequency_encoding(t))

    @torch.no_grad()
    def raw(self, z, t) -> np.ndarray:
        zb, single = as_batch(z)
        out = self.forward_torch(to_torch(zb), broadcast_scalar(t, len(zb)))
        out = out.numpy().astype(np.float64)
        return out[0] if single else out

    def apply(self, z, t, ref) -> np.ndarray:
        return stat_normalize(self.raw(z, t), ref, self.mean_mode)

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        meta = {"kind": "corrective", "unet": asdict(self.net.cfg), "mean_mode": self.mean_mode}
        meta.update(extra or {})
        return module_to_checkpoint(self.net, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CorrectiveNet":
        meta = ckpt.metadata
        if meta.get("kind") != "corrective":
            raise ValidationError("checkpoint does not hold a corrective net")
        net = UNet(UNetConfig(**meta["unet"]))
        load_module_state(net, ckpt)
        return cls(net, meta["mean_mode"])


def apply_corrective(b: CorrectiveNet, z, t, ref) -> np.ndarray:
    return b.apply(z, t, ref)


def train_corrective(triplets, cfg: CorrectiveConfig, channels: int = 1,
                     heldout=None) -> tuple[CorrectiveNet, list[dict]]:
    """Fit the bias network on batches drawn from ``triplets.next_batch``.

    ``heldout`` is an optional fixed ``(z, xhat, t)`` tuple used for plateau
    detection when ``cfg.patience`` > 0.
    """
    b = CorrectiveNet.create(channels, cfg.base, cfg.levels, cfg.mean_mode, cfg.seed)
    if cfg.steps == 0:
        return b, []
    net = b.net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    decay = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay)
    trace: list[dict] = []
    window: list[float] = []
    best, stale = np.inf, 0
    for step in range(1, cfg.steps + 1):
        z, xhat, t = triplets.next_batch(cfg.batch_size)
        pred = b.forward_torch(to_torch(z), to_torch(t))
        ref = to_torch(xhat)
        loss = ((ref - _stat_normalize_torch(pred, ref, cfg.mean_mode)) ** 2).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(f"corrective loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        decay.step()
        window.append(loss.item())
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append({"step": step, "loss": float(np.mean(window))})
            log.info("corrective step %d loss %.5f", step, trace[-1]["loss"])
            window = []
        if heldout is not None and cfg.patience and cfg.eval_every and step % cfg.eval_every == 0:
            net.eval()
            held = float(corrective_loss(b, *heldout).mean())
            net.train()
            trace.append({"step": step, "heldout": held})
            if held < best * (1.0 - cfg.plateau_tol):
                best, stale = held, 0
            else:
                stale += 1
            if step >= cfg.min_steps and stale >= cfg.patience:
                log.info("corrective plateau at step %d (held-out %.5f)", step, held)
                break
    net.eval()
    return b, trace


def corrective_loss(b: CorrectiveNet, z, xhat, t) -> np.ndarray:
    """Per-sample normalised-space loss of the trained network."""
    return normalized_loss(b.raw(z, t), xhat, b.mean_mode)


def identity_loss(z, xhat, mean_mode: str = "own") -> np.ndarray:
    """Same loss for the baseline that predicts the clean image itself."""
    return normalized_loss(z, xhat, mean_mode)


def corrective_gates(d: Denoiser, b: CorrectiveNet, held: LabeledDataset, n: int = 512,
                     seed: int = 7) -> dict:
    """Held-out loss of the trained and identity models plus triplet residuals
    at fixed timesteps."""
    stream = TripletStream(d, held, seed)
    out = {}
    for t in (0.3, 0.6, 0.9):
        z, xhat, tt = stream.next_batch(n, t=t)
        out[str(t)] = {"trained": float(corrective_loss(b, z, xhat, tt).mean()),
                       "identity": float(identity_loss(z, xhat, b.mean_mode).mean()),
                       "residual": float(np.mean(np.sqrt(((xhat - z) ** 2).sum(axis=(1, 2, 3)))))}
    return out
