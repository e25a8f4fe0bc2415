"""Feed-forward image translation trained only through distillation gradients.

The translator sees a source image plus a frequency-encoded target class and
is pushed toward that class by the guidance-plus-corrective gradient of the
frozen denoiser, while an L2 term to the input keeps it close to the source.
The L2 term dominates early and the distillation term takes over on a cosine
schedule.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .analysis import ProbeClassifier, feature_distance
from .corrective import CorrectiveNet
from .data import Checkpoint, LabeledDataset
from .diffusion import Denoiser
from .errors import ConfigError, DivergenceError, ValidationError
from .losses import EpsilonPolicy, LossConfig, grad_lmc_sds
from .nets import (
    UNet,
    UNetConfig,
    as_batch,
    frequency_encoding,
    load_module_state,
    module_to_checkpoint,
    seeded_init,
    to_torch,
)

log = logging.getLogger(__name__)


def encode_class(classes, num_classes: int) -> torch.Tensor:
    """Class index mapped to [0, 1] then frequency encoded."""
    c = torch.as_tensor(np.asarray(classes, dtype=np.float32))
    return frequency_encoding(c / max(num_classes - 1, 1))


class TranslatorNet:
    def __init__(self, net: UNet, num_classes: int):
        self.net = net.eval()
        self.num_classes = num_classes

    @classmethod
    def create(cls, num_classes: int, channels: int = 1, base: int = 16, levels: int = 4,
               seed: int = 0) -> "TranslatorNet":
        ucfg = UNetConfig(in_channels=channels, out_channels=channels, base=base,
                          levels=levels, act="relu", out_act="tanh")
        return cls(seeded_init(lambda: UNet(ucfg), seed), num_classes)

    def check_class(self, classes) -> np.ndarray:
        c = np.asarray(classes)
        if np.any(c < 0) or np.any(c >= self.num_classes):
            raise ValidationError(f"class id out of range [0, {self.num_classes})")
        return c

    def forward_torch(self, x: torch.Tensor, classes) -> torch.Tensor:
        return self.net(x, encode_class(classes, self.num_classes))

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        meta = {"kind": "translator", "unet": asdict(self.net.cfg),
                "num_classes": self.num_classes}
        meta.update(extra or {})
        return module_to_checkpoint(self.net, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TranslatorNet":
        meta = ckpt.metadata
        if meta.get("kind") != "translator":
            raise ValidationError("checkpoint does not hold a translator")
        net = UNet(UNetConfig(**meta["unet"]))
        load_module_state(net, ckpt)
        return cls(net, int(meta["num_classes"]))


@torch.no_grad()
def translate(net: TranslatorNet, image, cls) -> np.ndarray:
    """One forward pass; ``cls`` is a single id or one per image."""
    x, single = as_batch(np.asarray(image, dtype=np.float64))
    c = np.broadcast_to(net.check_class(cls), (len(x),))
    out = net.forward_torch(to_torch(x), c).numpy().astype(np.float64)
    return out[0] if single else out


@dataclass
class DistillConfig:
    steps: int = 6000
    batch_size: int = 16
    lr: float = 5e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 3000
    omega: float = 15.0
    lmc_start: float = 0.1
    lmc_end: float = 1.0
    l2_start: float = 1.0
    l2_end: float = 0.1
    transition: float = 0.3
    target_sampling: str = "per_image"
    t_range: tuple[float, float] = (0.02, 0.98)
    base: int = 16
    levels: int = 4
    seed: int = 0
    log_every: int = 250
    eval_images: int = 64

    def __post_init__(self):
        self.t_range = tuple(self.t_range)
        for name in ("lmc_start", "lmc_end", "l2_start", "l2_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.transition <= 1.0:
            raise ConfigError("transition must lie in (0, 1]")
        if self.target_sampling not in ("per_image", "per_batch"):
            raise ConfigError("target_sampling must be per_image or per_batch")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


def schedule_weights(step: int, cfg: DistillConfig) -> tuple[float, float]:
    """``(lambda_lmc, lambda_l2)`` with a cosine ramp over the transition window."""
    end = cfg.transition * max(cfg.steps, 1)
    frac = min(step / end, 1.0) if end > 0 else 1.0
    u = 0.5 * (1.0 - math.cos(math.pi * frac))
    return (cfg.lmc_start + (cfg.lmc_end - cfg.lmc_start) * u,
            cfg.l2_start + (cfg.l2_end - cfg.l2_start) * u)


def train_translator(source: LabeledDataset, target_classes: Sequence[int],
                     denoiser: Denoiser, corrective: CorrectiveNet | None,
                     cfg: DistillConfig | None = None,
                     heldout: LabeledDataset | None = None) -> tuple[TranslatorNet, list[dict]]:
    cfg = cfg or DistillConfig()
    targets = np.asarray(list(target_classes), dtype=np.int64)
    if len(targets) == 0:
        raise ValidationError("target_classes must be non-empty")
    if corrective is None:
        raise ConfigError("translator training needs a trained corrective network")
    if len(np.unique(source.labels)) != 1:
        raise ValidationError("source data must hold a single class")
    k = denoiser.num_classes
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValidationError(f"target classes must lie in [0, {k})")
    channels = source.images.shape[1]
    tnet = TranslatorNet.create(k, channels, cfg.base, cfg.levels, cfg.seed)
    if cfg.steps == 0:
        return tnet, []
    rng = np.random.default_rng(cfg.seed)
    policy = EpsilonPolicy("resample", seed=int(rng.integers(2 ** 32)))
    lcfg = LossConfig(omega=cfg.omega, t_range=cfg.t_range)
    net = tnet.net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    decay = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay)
    held = heldout.images[: cfg.eval_images] if heldout is not None else None
    trace: list[dict] = []
    acc = {"lmc": 0.0, "l2": 0.0, "n": 0}
    for step in range(cfg.steps):
        w_lmc, w_l2 = schedule_weights(step, cfg)
        idx = rng.integers(0, len(source), cfg.batch_size)
        x_np = source.images[idx].astype(np.float64)
        if cfg.target_sampling == "per_image":
            cls = targets[rng.integers(0, len(targets), cfg.batch_size)]
        else:
            cls = np.full(cfg.batch_size, targets[rng.integers(0, len(targets))])
        t = rng.uniform(*cfg.t_range, cfg.batch_size)
        x = to_torch(x_np)
        out = tnet.forward_torch(x, cls)
        z = out.detach().numpy().astype(np.float64)
        g = grad_lmc_sds(denoiser, z, cls, t, lcfg, policy=policy, corrective=corrective).grad
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite distillation gradient at step {step}")
        l2 = 0.5 * ((out - x) ** 2).sum() / cfg.batch_size
        surrogate = (to_torch(g) * out).sum() / cfg.batch_size
        loss = w_lmc * surrogate + w_l2 * l2
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        decay.step()
        if not all(torch.isfinite(p).all() for p in net.parameters()):
            raise DivergenceError(f"translator parameters diverged at step {step}")
        acc["lmc"] += float(np.sqrt(np.mean(g ** 2)))
        acc["l2"] += l2.item()
        acc["n"] += 1
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            row = {"step": step + 1, "w_lmc": w_lmc, "w_l2": w_l2,
                   "grad_rms": acc["lmc"] / acc["n"], "l2": acc["l2"] / acc["n"]}
            if held is not None:
                net.eval()
                rec = translate(tnet, held, targets[np.arange(len(held)) % len(targets)])
                row["heldout_l2"] = float(np.mean((rec - held) ** 2))
                net.train()
            trace.append(row)
            log.info("translator %s", row)
            acc = {"lmc": 0.0, "l2": 0.0, "n": 0}
    net.eval()
    return tnet, trace


def evaluate_translator(tnet: TranslatorNet, images, target_classes: Sequence[int],
                        probe: ProbeClassifier) -> list[dict]:
    """Per-target retrieval (arg-max restricted to the targets) and mean
    probe-feature distance between input and output."""
    from .analysis import retrieval_accuracy

    targets = list(target_classes)
    rows = []
    for c in targets:
        out = translate(tnet, images, c)
        rows.append({"class": c,
                     "retrieval": retrieval_accuracy(probe, out, c, candidates=targets),
                     "feature_distance": float(np.mean(feature_distance(probe, images, out))),
                     "l2": float(np.mean((out - images) ** 2))})
    return rows


def identity_retrieval(images, target_classes: Sequence[int], probe: ProbeClassifier) -> float:
    """Retrieval of the baseline that returns its input for every target."""
    from .analysis import retrieval_accuracy

    targets = list(target_classes)
    return float(np.mean([retrieval_accuracy(probe, images, c, candidates=targets)
                          for c in targets]))


def write_eval_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["class", "retrieval", "feature_distance", "l2"])
        w.writeheader()
        w.writerows(rows)
