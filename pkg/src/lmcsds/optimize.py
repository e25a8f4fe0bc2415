"""Optimisation of images through differentiable parameterisations.

A canvas larger than the model resolution is handled in two phases: the whole
canvas is first resampled down to model resolution, after which random square
patches of random size are resampled instead. Every resampling is a separable
linear operator, so gradients return to the canvas through its exact adjoint.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import torch

from . import losses
from .errors import ConfigError, DivergenceError, ValidationError
from .losses import EpsilonPolicy, GradResult, LossConfig

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# linear resampling


@lru_cache(maxsize=512)
def resample_matrix(src_len: int, start: float, extent: float, out_len: int) -> np.ndarray:
    """``(out_len, src_len)`` triangle-filter resampling of ``[start, start+extent)``.

    The filter widens with the downscale factor (antialiased bilinear) and rows
    are renormalised over in-bounds taps, so nothing outside the source is read.
    """
    scale = extent / out_len
    radius = max(1.0, scale)
    centers = start + (np.arange(out_len) + 0.5) * scale - 0.5
    j = np.arange(src_len)
    w = np.maximum(0.0, 1.0 - np.abs(j[None, :] - centers[:, None]) / radius)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def apply_separable(ry: np.ndarray, rx: np.ndarray, img: np.ndarray) -> np.ndarray:
    return np.einsum("ih,...hw,jw->...ij", ry, img, rx)


def adjoint_separable(ry: np.ndarray, rx: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum("ih,...ij,jw->...hw", ry, g, rx)


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Resample a (..., H, W) image to (..., size, size)."""
    h, w = img.shape[-2:]
    return apply_separable(resample_matrix(h, 0.0, float(h), size),
                           resample_matrix(w, 0.0, float(w), size), img)


@dataclass(frozen=True)
class View:
    """A square window of the canvas mapped to model resolution."""

    top: int
    left: int
    side: int
    ry: np.ndarray = field(repr=False, compare=False)
    rx: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def make(cls, canvas: tuple[int, int], top: int, left: int, side: int, out: int) -> "View":
        h, w = canvas
        if top < 0 or left < 0 or top + side > h or left + side > w:
            raise ValidationError("view extends outside the canvas")
        return cls(top, left, side, resample_matrix(h, float(top), float(side), out),
                   resample_matrix(w, float(left), float(side), out))

    def extract(self, canvas: np.ndarray) -> np.ndarray:
        return apply_separable(self.ry, self.rx, canvas)

    def scatter(self, g: np.ndarray) -> np.ndarray:
        return adjoint_separable(self.ry, self.rx, g)

    def footprint(self) -> np.ndarray:
        return (self.ry.sum(axis=0) > 0)[:, None] & (self.rx.sum(axis=0) > 0)[None, :]


def sample_patches(rng: np.random.Generator, canvas: tuple[int, int], model_res: int,
                   count: int) -> list[View]:
    """Side uniform in [model_res, min(canvas)], position uniform over valid offsets."""
    h, w = canvas
    views = []
    for _ in range(count):
        side = int(rng.integers(model_res, min(h, w) + 1))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        views.append(View.make(canvas, top, left, side, model_res))
    return views


# --------------------------------------------------------------------------
# parameterisations


class Parameterization:
    """Differentiable map from parameters to a (C, H, W) canvas."""

    canvas_shape: tuple[int, int, int]

    def render(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pullback(self, theta: np.ndarray, grad_canvas: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def init_constant(self, value: float) -> np.ndarray:
        raise NotImplementedError

    def fit(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class DirectPixels(Parameterization):
    def __init__(self, channels: int, size: int):
        self.canvas_shape = (channels, size, size)

    def render(self, theta):
        return np.asarray(theta, dtype=np.float64)

    def pullback(self, theta, grad_canvas):
        return np.asarray(grad_canvas, dtype=np.float64)

    def init_constant(self, value):
        return np.full(self.canvas_shape, value, dtype=np.float64)

    def fit(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.shape[-1] != self.canvas_shape[-1]:
            image = resize(image, self.canvas_shape[-1])
        return image.copy()


class LatentGrid(Parameterization):
    """Low-resolution grid bilinearly upsampled to the canvas."""

    def __init__(self, channels: int, grid: int, size: int):
        self.grid = grid
        self.canvas_shape = (channels, size, size)
        self.up = resample_matrix(grid, 0.0, float(grid), size)

    def render(self, theta):
        return apply_separable(self.up, self.up, np.asarray(theta, dtype=np.float64))

    def pullback(self, theta, grad_canvas):
        return adjoint_separable(self.up, self.up, np.asarray(grad_canvas, dtype=np.float64))

    def init_constant(self, value):
        return np.full((self.canvas_shape[0], self.grid, self.grid), value, dtype=np.float64)

    def fit(self, image):
        """Least-squares grid whose upsampling best matches ``image``."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape[-1] != self.canvas_shape[-1]:
            image = resize(image, self.canvas_shape[-1])
        pinv = np.linalg.pinv(self.up)
        return apply_separable(pinv, pinv, image)


# --------------------------------------------------------------------------
# configuration and schedules


def cosine_lr(step: int, base_lr: float, floor: float, horizon: int) -> float:
    """Cosine decay from ``base_lr`` to ``base_lr * floor`` over ``horizon`` steps."""
    frac = min(step, horizon) / max(horizon, 1)
    return base_lr * ((1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)) + floor)


@dataclass
class OptimConfig:
    steps: int = 300
    lr: float = 0.05
    lr_floor: float = 0.03
    decay_steps: Optional[int] = None
    loss: str = "lmc_sds"
    omega: float = 8.0
    epsilon: str = "resample"
    rescale_by_inv_omega: bool = True
    drop_proj_weight: bool = True
    t_range: tuple[float, float] = (0.02, 0.98)
    mssds_k: int = 5
    anchor_weight: float = 0.0
    whole_steps: int = 100
    patches: int = 2
    canvas: int = 96
    model_res: int = 32
    clamp: bool = True
    snapshot_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.t_range = tuple(self.t_range)
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.canvas < self.model_res:
            raise ConfigError("canvas must be at least the model resolution")
        if self.patches < 1:
            raise ConfigError("patches must be >= 1")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.omega, self.rescale_by_inv_omega, self.drop_proj_weight,
                          self.t_range, self.epsilon, self.mssds_k)

    @property
    def horizon(self) -> int:
        """Step index at which the rate reaches its floor (the last step by default)."""
        return self.decay_steps if self.decay_steps is not None else max(self.steps - 1, 1)


SYNTHESIS_DEFAULTS = OptimConfig()
EDIT_DEFAULTS = OptimConfig(lr=0.02, lr_floor=0.8, omega=15.0, anchor_weight=0.1,
                            whole_steps=120, canvas=32)

LossFn = Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], GradResult]


def make_loss_fn(cfg: OptimConfig, denoiser, corrective=None, y=None, y_ref=None,
                 policy: EpsilonPolicy | None = None) -> LossFn:
    """Bind a loss from ``losses`` to a fixed class, networks and noise policy."""
    lcfg = cfg.loss_config()
    policy = policy or EpsilonPolicy(cfg.epsilon, seed=_child_seed(cfg.seed, 1))
    if cfg.loss in ("lmc", "lmc_sds") and corrective is None:
        raise ConfigError(f"loss {cfg.loss!r} needs a corrective network")

    def fn(views, t, ref_views=None):
        return losses.compute(cfg.loss, denoiser, views, y, t, lcfg, policy=policy,
                              corrective=corrective, z_ref=ref_views, y_ref=y_ref)

    fn.policy = policy
    return fn


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class OptimResult:
    image: np.ndarray
    trace: list[dict]
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)


def optimize(param: Parameterization, theta0: np.ndarray, cfg: OptimConfig, loss_fn: LossFn,
             anchor: np.ndarray | None = None, reference: np.ndarray | None = None
             ) -> OptimResult:
    """Adam on ``theta`` with the whole-canvas phase followed by the patch phase.

    ``anchor`` adds ``anchor_weight * (canvas - anchor)`` to the canvas gradient;
    ``reference`` is a canvas whose matching views are handed to the loss
    (used by DDS).
    """
    rng = np.random.default_rng(_child_seed(cfg.seed, 0))
    c, h, w = param.canvas_shape
    theta = torch.tensor(np.asarray(theta0, dtype=np.float64))
    opt = torch.optim.Adam([theta], lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    whole = View.make((h, w), 0, 0, h, cfg.model_res) if h == w else None
    if whole is None:
        raise ValidationError("only square canvases are supported")
    trace: list[dict] = []
    snaps: list[tuple[int, np.ndarray]] = []
    lo, hi = cfg.t_range
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.lr, cfg.lr_floor, cfg.horizon)
        for group in opt.param_groups:
            group["lr"] = lr
        canvas = param.render(theta.numpy())
        phase = "whole" if step < cfg.whole_steps else "patch"
        views = [whole] if phase == "whole" else sample_patches(rng, (h, w), cfg.model_res,
                                                                cfg.patches)
        t = rng.uniform(lo, hi, len(views))
        batch = np.stack([v.extract(canvas) for v in views])
        ref = None if reference is None else np.stack([v.extract(reference) for v in views])
        res = loss_fn(batch, t, ref)
        g = np.zeros((c, h, w))
        cover = np.zeros((h, w))
        for v, gv in zip(views, np.asarray(res.grad).reshape(batch.shape)):
            g += v.scatter(gv)
            cover += v.footprint()
        g /= np.maximum(cover, 1.0)
        if anchor is not None and cfg.anchor_weight:
            g = g + cfg.anchor_weight * (canvas - anchor)
        dtheta = param.pullback(theta.numpy(), g)
        if not np.all(np.isfinite(dtheta)):
            raise DivergenceError(f"non-finite gradient at step {step}")
        theta.grad = torch.from_numpy(np.ascontiguousarray(dtheta))
        opt.step()
        if cfg.clamp:
            with torch.no_grad():
                theta.clamp_(-1.0, 1.0)
        if not torch.all(torch.isfinite(theta)):
            raise DivergenceError(f"non-finite parameters after step {step}")
        row = {"step": step, "phase": phase, "lr": lr, "views": len(views),
               "t": float(np.mean(t)), "overlap": "coverage-mean",
               "max_cover": float(cover.max())}
        row.update({k: v for k, v in res.diagnostics.items() if isinstance(v, (int, float, str))})
        trace.append(row)
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            snaps.append((step + 1, param.render(theta.numpy())))
    return OptimResult(param.render(theta.numpy()), trace, snaps)


def run_synthesis(y: int, param: Parameterization, cfg: OptimConfig, denoiser=None,
                  corrective=None, loss_fn: LossFn | None = None) -> OptimResult:
    """Optimise a canvas initialised to mid-grey (0 in [-1, 1]) towards class ``y``."""
    if loss_fn is None:
        if denoiser is None:
            raise ConfigError("run_synthesis needs a denoiser or an explicit loss_fn")
        loss_fn = make_loss_fn(cfg, denoiser, corrective, y)
    return optimize(param, param.init_constant(0.0), cfg, loss_fn)


def run_edit(image: np.ndarray, y_target: int, param: Parameterization, cfg: OptimConfig,
             denoiser=None, corrective=None, y_source: int | None = None,
             loss_fn: LossFn | None = None, policy: EpsilonPolicy | None = None
             ) -> OptimResult:
    """Optimise starting from ``image`` with an L2 anchor to the initial canvas."""
    theta0 = param.fit(image)
    init_canvas = param.render(theta0)
    if loss_fn is None:
        if denoiser is None:
            raise ConfigError("run_edit needs a denoiser or an explicit loss_fn")
        if cfg.loss == "dds" and y_source is None:
            raise ConfigError("DDS editing needs the source class")
        loss_fn = make_loss_fn(cfg, denoiser, corrective, y_target, y_source, policy)
    reference = init_canvas if cfg.loss == "dds" else None
    return optimize(param, theta0, cfg, loss_fn, anchor=init_canvas, reference=reference)


def run_variants(image: np.ndarray, y_target: int, n: int, param: Parameterization,
                 cfg: OptimConfig, denoiser, corrective=None,
                 policy: str = "fixed_cond_only", y_source: int | None = None
                 ) -> list[OptimResult]:
    """``n`` edits of one image that differ only in their seed (and thus noise)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    out = []
    for i in range(n):
        vcfg = replace(cfg, seed=cfg.seed + i, epsilon=policy)
        out.append(run_edit(image, y_target, param, vcfg, denoiser, corrective, y_source))
    return out


def finite_difference_check(param: Parameterization, theta: np.ndarray, weights: np.ndarray,
                            h: float = 1e-3, directions: int = 8, seed: int = 0) -> float:
    """Worst relative error between the pullback and central differences of the
    quadratic test loss ``0.5 * sum(weights * render(theta)**2)`` along random
    directions."""
    rng = np.random.default_rng(seed)

    def loss(th):
        return 0.5 * float(np.sum(weights * param.render(th) ** 2))

    grad = param.pullback(theta, weights * param.render(theta))
    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(theta.shape)
        fd = (loss(theta + h * d) - loss(theta - h * d)) / (2 * h)
        an = float(np.sum(grad * d))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return worst
