"""Image-space gradients of SDS-style distillation losses.

Every operator evaluates the frozen networks without backpropagating through
them and returns the gradient with respect to the clean image ``z`` (the
``sqrt(alpha_bar)`` factor of the noising map is applied here). Images are
``(C, H, W)`` or ``(N, C, H, W)``; ``t`` is a scalar or one value per image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .corrective import CorrectiveNet
from .diffusion import NULL_LABEL, Denoiser, cfg_combine, diffuse, x0_from_eps
from .errors import ConfigError, ValidationError

EPSILON_MODES = ("resample", "fixed", "fixed_cond_only")
LOSS_KINDS = ("sds", "cond", "proj", "lmc", "lmc_sds", "dds", "mssds")


@dataclass
class GradResult:
    grad: np.ndarray
    components: dict[str, np.ndarray]
    diagnostics: dict = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def component_sum(self) -> np.ndarray:
        return sum(self.components.values())

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.components.items()}


@dataclass
class LossConfig:
    omega: float = 8.0
    rescale_by_inv_omega: bool = True
    drop_proj_weight: bool = True
    t_range: tuple[float, float] = (0.02, 0.98)
    epsilon: str = "resample"
    mssds_k: int = 5

    def __post_init__(self):
        self.t_range = tuple(self.t_range)
        if self.omega <= 0:
            raise ConfigError("omega must be > 0")
        if self.mssds_k < 1:
            raise ConfigError("mssds_k must be >= 1")
        if self.epsilon not in EPSILON_MODES:
            raise ConfigError(f"epsilon must be one of {EPSILON_MODES}")

    @property
    def scale(self) -> float:
        return 1.0 / self.omega if self.rescale_by_inv_omega else 1.0


class EpsilonPolicy:
    """Noise source for one optimisation run.

    ``fixed`` reuses a single stored draw for both loss terms; ``fixed_cond_only``
    reuses it for the guidance term only and draws fresh noise for the manifold
    term. The stored draw has the per-image shape and is broadcast over batches.
    """

    def __init__(self, mode: str = "resample", seed: int = 0):
        if mode not in EPSILON_MODES:
            raise ConfigError(f"epsilon mode must be one of {EPSILON_MODES}")
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.stored: Optional[np.ndarray] = None

    def _fixed(self, shape) -> np.ndarray:
        image_shape = tuple(shape[-3:])
        if self.stored is None:
            self.stored = self.rng.standard_normal(image_shape)
        elif self.stored.shape != image_shape:
            raise ValidationError(
                f"stored noise has shape {self.stored.shape}, requested {image_shape}")
        return np.broadcast_to(self.stored, tuple(shape)).copy()

    def draw(self, shape) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(eps_cond, eps_manifold)``; the two are the same array unless
        the mode separates them."""
        if self.mode == "resample":
            e = self.rng.standard_normal(tuple(shape))
            return e, e
        if self.mode == "fixed":
            e = self._fixed(shape)
            return e, e
        return self._fixed(shape), self.rng.standard_normal(tuple(shape))


# --------------------------------------------------------------------------
# helpers


def _prepare(z, t, denoiser: Denoiser):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 3
    zb = z[None] if single else z
    n = len(zb)
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    a = denoiser.schedule.alpha_bar(tb).reshape(n, 1, 1, 1)
    return zb, tb, a, single


def _labels(y, n: int) -> np.ndarray:
    if y is None:
        return np.full(n, NULL_LABEL, dtype=np.int64)
    return np.broadcast_to(np.asarray(y, dtype=np.int64), (n,)).copy()


def _noise(eps, policy: Optional[EpsilonPolicy], shape):
    if eps is not None:
        if isinstance(eps, tuple):
            e_c, e_m = (np.broadcast_to(np.asarray(e, dtype=np.float64), shape) for e in eps)
            return e_c, e_m
        e = np.broadcast_to(np.asarray(eps, dtype=np.float64), shape)
        return e, e
    if policy is None:
        raise ValidationError("either eps or an EpsilonPolicy is required")
    return policy.draw(shape)


def _eval(denoiser: Denoiser, z_ts: list[np.ndarray], labels: list[np.ndarray], t: np.ndarray):
    """One batched forward over several (z_t, labels) groups sharing ``t``."""
    n = len(t)
    out = denoiser.predict_noise(np.concatenate(z_ts), np.concatenate(labels),
                                 np.tile(t, len(z_ts)))
    return [out[i * n:(i + 1) * n] for i in range(len(z_ts))]


def _branches(denoiser: Denoiser, z_t: np.ndarray, y: np.ndarray, t: np.ndarray):
    """Conditional and unconditional noise predictions at ``z_t``.

    Rows with a null label reuse the unconditional prediction, so their guidance
    difference is exactly zero.
    """
    null = y == NULL_LABEL
    if np.all(null):
        (eu,) = _eval(denoiser, [z_t], [y], t)
        return eu.copy(), eu
    ec, eu = _eval(denoiser, [z_t, z_t], [y, np.full_like(y, NULL_LABEL)], t)
    ec[null] = eu[null]
    return ec, eu


def _finish(single: bool, grad, components, diagnostics, extras=None) -> GradResult:
    if single:
        grad = grad[0]
        components = {k: v[0] for k, v in components.items()}
        extras = {k: v[0] for k, v in (extras or {}).items()}
    res = GradResult(grad, components, diagnostics, extras or {})
    res.diagnostics.update({f"norm_{k}": v for k, v in res.norms().items()})
    return res


def _diag(t, cfg: LossConfig, scale: float, **kw) -> dict:
    d = {"t": float(np.mean(t)), "omega": cfg.omega, "scale": scale}
    d.update(kw)
    return d


def _proj_weight(a, cfg: LossConfig):
    return 1.0 if cfg.drop_proj_weight else np.sqrt(a) / np.sqrt(1.0 - a)


# --------------------------------------------------------------------------
# operators


def grad_sds(denoiser: Denoiser, z, y, t, cfg: LossConfig | None = None, *, eps=None,
             policy: EpsilonPolicy | None = None, corrective=None) -> GradResult:
    """Guided noise residual, split into guidance and single-step-denoising parts."""
    cfg = cfg or LossConfig()
    zb, tb, a, single = _prepare(z, t, denoiser)
    e, _ = _noise(eps, policy, zb.shape)
    z_t = diffuse(zb, e, a)
    ec, eu = _branches(denoiser, z_t, _labels(y, len(zb)), tb)
    sa = np.sqrt(a)
    s = cfg.scale
    grad = (cfg_combine(ec, eu, cfg.omega) - e) * sa * s
    comps = {"cond": cfg.omega * (ec - eu) * sa * s, "proj": (eu - e) * sa * s}
    return _finish(single, grad, comps, _diag(tb, cfg, s, loss="sds"))


def grad_cond(denoiser: Denoiser, z, y, t, cfg: LossConfig | None = None, *, eps=None,
              policy: EpsilonPolicy | None = None, corrective=None) -> GradResult:
    cfg = cfg or LossConfig()
    zb, tb, a, single = _prepare(z, t, denoiser)
    e, _ = _noise(eps, policy, zb.shape)
    ec, eu = _branches(denoiser, diffuse(zb, e, a), _labels(y, len(zb)), tb)
    g = cfg.omega * (ec - eu) * np.sqrt(a)
    return _finish(single, g, {"cond": g}, _diag(tb, cfg, 1.0, loss="cond"))


def grad_proj(denoiser: Denoiser, z, y, t, cfg: LossConfig | None = None, *, eps=None,
              policy: EpsilonPolicy | None = None, corrective=None) -> GradResult:
    """Unconditional noise residual (independent of ``y`` and ``omega``)."""
    cfg = cfg or LossConfig()
    zb, tb, a, single = _prepare(z, t, denoiser)
    _, e = _noise(eps, policy, zb.shape)
    (eu,) = _eval(denoiser, [diffuse(zb, e, a)], [_labels(None, len(zb))], tb)
    g = (eu - e) * np.sqrt(a)
    return _finish(single, g, {"proj": g}, _diag(tb, cfg, 1.0, loss="proj"))


def grad_proj_x0(denoiser: Denoiser, z, y, t, cfg: LossConfig | None = None, *, eps=None,
                 policy: EpsilonPolicy | None = None, corrective=None) -> GradResult:
    """The projection term written as a comparison of ``z`` with the one-step
    reconstruction; equals :func:`grad_proj` unless the weight is dropped."""
    cfg = cfg or LossConfig()
    zb, tb, a, single = _prepare(z, t, denoiser)
    _, e = _noise(eps, policy, zb.shape)
    z_t = diffuse(zb, e, a)
    (eu,) = _eval(denoiser, [z_t], [_labels(None, len(zb))], tb)
    xhat = x0_from_eps(z_t, eu, a)
    g = _proj_weight(a, cfg) * (zb - xhat) * np.sqrt(a)
    diag = _diag(tb, cfg, 1.0, loss="proj_x0", proj_weight_dropped=cfg.drop_proj_weight)
    return _finish(single, g, {"proj": g}, diag, {"xhat": xhat})


def _require(corrective):
    if corrective is None:
        raise ConfigError("this loss needs a trained corrective network")
    return corrective


def grad_lmc(denoiser: Denoiser, z, y, t, cfg: LossConfig | None = None, *, eps=None,
             policy: EpsilonPolicy | None = None,
             corrective: CorrectiveNet | None = None) -> GradResult:
    """Reconstruction compared against the bias-corrected clean image."""
    cfg = cfg or LossConfig()
    b = _require(corrective)
    zb, tb, a, single = _prepare(z, t, denoiser)
    _, e = _noise(eps, policy, zb.shape)
    z_t = diffuse(zb, e, a)
    (eu,) = _eval(denoiser, [z_t], [_labels(None, len(zb))], tb)
    xhat = x0_from_eps(z_t, eu, a)
    target = b.apply(zb, tb, xhat)
    g = (target - xhat) * np.sqrt(a)
    return _finish(single, g, {"lmc": g}, _diag(tb, cfg, 1.0, loss="lmc"),
                   {"xhat": xhat, "corrected": target})


def grad_lmc_sds(denoiser: Denoiser, z, y, t, cfg: LossConfig | None = None, *, eps=None,
                 policy: EpsilonPolicy | None = None,
                 corrective: CorrectiveNet | None = None) -> GradResult:
    """Guidance term plus the bias-corrected manifold term.

    When the policy separates the two noise draws each term gets its own noisy
    image; otherwise one noisy image serves both.
    """
    cfg = cfg or LossConfig()
    b = _require(corrective)
    zb, tb, a, single = _prepare(z, t, denoiser)
    y_arr = _labels(y, len(zb))
    e_c, e_m = _noise(eps, policy, zb.shape)
    shared = e_c is e_m
    z_c = diffuse(zb, e_c, a)
    if shared:
        ec, eu = _branches(denoiser, z_c, y_arr, tb)
        z_m, eu_m = z_c, eu
    else:
        null = np.full_like(y_arr, NULL_LABEL)
        z_m = diffuse(zb, e_m, a)
        ec, eu, eu_m = _eval(denoiser, [z_c, z_c, z_m], [y_arr, null, null], tb)
        is_null = y_arr == NULL_LABEL
        ec[is_null] = eu[is_null]
    sa = np.sqrt(a)
    s = cfg.scale
    xhat = x0_from_eps(z_m, eu_m, a)
    target = b.apply(zb, tb, xhat)
    comps = {"cond": cfg.omega * (ec - eu) * sa * s, "lmc": (target - xhat) * sa * s}
    grad = comps["cond"] + comps["lmc"]
    diag = _diag(tb, cfg, s, loss="lmc_sds", shared_noise=bool(shared),
                 epsilon=policy.mode if policy else "explicit")
    return _finish(single, grad, comps, diag, {"xhat": xhat, "corrected": target})


def grad_dds(denoiser: Denoiser, z, z_ref, y_target, y_ref, t,
             cfg: LossConfig | None = None, *, eps=None,
             policy: EpsilonPolicy | None = None, corrective=None) -> GradResult:
    """Difference of two guided residuals: current image with the target class
    minus the reference image with its own class, under shared noise and t.

    The explicit noise cancels between the two terms, which removes the
    projection term's dependence on the drawn noise.
    """
    cfg = cfg or LossConfig()
    if z_ref is None:
        raise ConfigError("DDS needs a reference image")
    zb, tb, a, single = _prepare(z, t, denoiser)
    zr = np.asarray(z_ref, dtype=np.float64)
    zr = zr[None] if zr.ndim == 3 else zr
    zr = np.broadcast_to(zr, zb.shape)
    e, _ = _noise(eps, policy, zb.shape)
    n = len(zb)
    yt, yr = _labels(y_target, n), _labels(y_ref, n)
    null = np.full(n, NULL_LABEL, dtype=np.int64)
    zt, zrt = diffuse(zb, e, a), diffuse(zr, e, a)
    ec, eu, ec_r, eu_r = _eval(denoiser, [zt, zt, zrt, zrt], [yt, null, yr, null], tb)
    ec[yt == NULL_LABEL] = eu[yt == NULL_LABEL]
    ec_r[yr == NULL_LABEL] = eu_r[yr == NULL_LABEL]
    sa = np.sqrt(a)
    s = cfg.scale
    pos = (cfg_combine(ec, eu, cfg.omega) - e) * sa * s
    neg = -(cfg_combine(ec_r, eu_r, cfg.omega) - e) * sa * s
    pos_proj, neg_proj = (eu - e) * sa * s, (eu_r - e) * sa * s
    proj_delta = pos_proj - neg_proj
    noise_residual = proj_delta - (eu - eu_r) * sa * s
    grad = (cfg.omega * ((ec - eu) - (ec_r - eu_r)) + (eu - eu_r)) * sa * s
    diag = _diag(tb, cfg, s, loss="dds",
                 proj_delta_norm=float(np.linalg.norm(proj_delta)),
                 proj_noise_residual=float(np.linalg.norm(noise_residual)))
    extras = {"pos_proj": pos_proj, "neg_proj": neg_proj}
    return _finish(single, grad, {"pos": pos, "neg": neg}, diag, extras)


def multistep_x0(denoiser: Denoiser, z_t, t, k: int, eps_first=None) -> np.ndarray:
    """Clean-image estimate from ``k`` deterministic DDIM steps (unconditional)
    on a uniform grid from ``t`` down to 0."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    z_t = np.asarray(z_t, dtype=np.float64)
    n = len(z_t)
    grid = np.linspace(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)), 0.0, k + 1)
    null = _labels(None, n)
    z = z_t
    for i in range(k):
        a = denoiser.schedule.alpha_bar(grid[i]).reshape(n, 1, 1, 1)
        if i == 0 and eps_first is not None:
            eh = eps_first
        else:
            (eh,) = _eval(denoiser, [z], [null], grid[i])
        x0 = x0_from_eps(z, eh, a)
        if i == k - 1:
            return x0
        a_next = denoiser.schedule.alpha_bar(grid[i + 1]).reshape(n, 1, 1, 1)
        z = np.sqrt(a_next) * x0 + np.sqrt(1.0 - a_next) * eh
    raise AssertionError("unreachable")


def grad_mssds(denoiser: Denoiser, z, y, t, cfg: LossConfig | None = None, *, k=None,
               eps=None, policy: EpsilonPolicy | None = None, corrective=None) -> GradResult:
    """Guidance term plus a projection term built from a multi-step reconstruction."""
    cfg = cfg or LossConfig()
    k = cfg.mssds_k if k is None else k
    if k < 1:
        raise ValidationError("k must be >= 1")
    zb, tb, a, single = _prepare(z, t, denoiser)
    e, _ = _noise(eps, policy, zb.shape)
    z_t = diffuse(zb, e, a)
    ec, eu = _branches(denoiser, z_t, _labels(y, len(zb)), tb)
    xhat = multistep_x0(denoiser, z_t, tb, k, eps_first=eu)
    sa = np.sqrt(a)
    s = cfg.scale
    comps = {"cond": cfg.omega * (ec - eu) * sa * s,
             "proj": _proj_weight(a, cfg) * (zb - xhat) * sa * s}
    grad = comps["cond"] + comps["proj"]
    diag = _diag(tb, cfg, s, loss="mssds", k=k, proj_weight_dropped=cfg.drop_proj_weight)
    return _finish(single, grad, comps, diag, {"xhat": xhat})


OPERATORS = {
    "sds": grad_sds,
    "cond": grad_cond,
    "proj": grad_proj,
    "lmc": grad_lmc,
    "lmc_sds": grad_lmc_sds,
    "mssds": grad_mssds,
}


def compute(kind: str, denoiser: Denoiser, z, y, t, cfg: LossConfig, *,
            policy: EpsilonPolicy | None = None, corrective=None, z_ref=None,
            y_ref=None, eps=None) -> GradResult:
    """Dispatch by loss name; ``dds`` additionally consumes ``z_ref``/``y_ref``."""
    if kind == "dds":
        if z_ref is None:
            raise ConfigError("DDS needs a reference image")
        return grad_dds(denoiser, z, z_ref, y, y_ref, t, cfg, eps=eps, policy=policy)
    if kind not in OPERATORS:
        raise ConfigError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")
    return OPERATORS[kind](denoiser, z, y, t, cfg, eps=eps, policy=policy,
                           corrective=corrective)


DIAGNOSTIC_FIELDS = ("step", "t", "omega", "scale", "norm_cond", "norm_proj", "norm_lmc",
                     "norm_pos", "norm_neg")


class DiagnosticsWriter:
    """Streams one CSV row per gradient evaluation."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.DictWriter(self._fh, DIAGNOSTIC_FIELDS, extrasaction="ignore")
        self._w.writeheader()

    def write(self, step: int, res: GradResult) -> None:
        row = {k: "" for k in DIAGNOSTIC_FIELDS}
        row.update({k: v for k, v in res.diagnostics.items() if k in DIAGNOSTIC_FIELDS})
        row["step"] = step
        self._w.writerow(row)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
