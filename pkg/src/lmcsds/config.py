"""Run configuration: a strict JSON document with one section per module."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields
from pathlib import Path

from .corrective import CorrectiveConfig
from .diffusion import DenoiserArch, TrainConfig
from .distill_translate import DistillConfig
from .errors import ConfigError
from .losses import LossConfig
from .optimize import EDIT_DEFAULTS, OptimConfig


def _section(dc, drop=("seed",), **extra) -> dict:
    d = {k: v for k, v in asdict(dc).items() if k not in drop}
    d.update(extra)
    return json.loads(json.dumps(d))


def _diffusion_defaults() -> dict:
    d = _section(TrainConfig(), drop=("seed", "arch"))
    d.update({k: v for k, v in asdict(DenoiserArch()).items() if k != "channels"})
    d["schedule_knots"] = 1000
    return d


def _edit_overlay() -> dict:
    keys = ("lr", "lr_floor", "omega", "anchor_weight", "whole_steps", "canvas")
    return {k: getattr(EDIT_DEFAULTS, k) for k in keys}


def default_config() -> dict:
    return {
        "seed": 0,
        "data": {"source": "shapes", "count": 6000, "classes": 6, "size": 32,
                 "heldout_fraction": 0.05, "idx_images": "", "idx_labels": ""},
        "diffusion": _diffusion_defaults(),
        "corrective": _section(CorrectiveConfig(), triplet_cache_size=0),
        "loss": _section(LossConfig(), kind="lmc_sds"),
        "optimize": _section(OptimConfig(), drop=("seed", "loss", "omega", "epsilon",
                                                  "rescale_by_inv_omega", "drop_proj_weight",
                                                  "t_range", "mssds_k"),
                             parameterization="pixels", grid=8, target_class=1,
                             source_class=0, image_index=0, variants=8,
                             variant_policy="fixed_cond_only", edit=_edit_overlay()),
        "translate": _section(DistillConfig(), source_class=0, target_classes=[1, 2, 3, 5]),
        "analysis": {"probe_steps": 1500, "probe_batch": 64, "probe_width": 16,
                     "probe_lr": 2e-3, "probe_min_accuracy": 0.9,
                     "sweep_omegas": [2.0, 4.0, 8.0, 15.0],
                     "sweep_losses": ["sds", "lmc_sds", "dds"],
                     "sweep_images": 8, "sweep_steps": 200},
    }


def _check_keys(cfg, ref, path=""):
    if isinstance(ref, dict):
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        for k, v in cfg.items():
            p = f"{path}.{k}" if path else k
            if k not in ref:
                raise ConfigError(f"unknown config key: {p}")
            _check_keys(v, ref[k], p)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the JSON file, then ``section.key=value`` overrides."""
    ref = default_config()
    cfg = ref
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _check_keys(user, ref)
        cfg = _merge(ref, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        parts = key.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = {}
        cur = node
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        _check_keys(node, ref)
        cfg = _merge(cfg, node)
    if seed is not None:
        cfg["seed"] = int(seed)
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed: must be an integer")
    return cfg


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def digest(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def _build(cls, section: dict, seed: int, **extra):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    kw.update(extra)
    if "seed" in names:
        kw["seed"] = seed
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    s = cfg["diffusion"]
    arch = DenoiserArch(base=s["base"], levels=s["levels"], embed_dim=s["embed_dim"])
    return _build(TrainConfig, s, cfg["seed"], arch=arch)


def corrective_config(cfg: dict) -> CorrectiveConfig:
    return _build(CorrectiveConfig, cfg["corrective"], cfg["seed"])


def loss_config(cfg: dict) -> LossConfig:
    return _build(LossConfig, cfg["loss"], cfg["seed"])


def optim_config(cfg: dict, loss: str | None = None, edit: bool = False) -> OptimConfig:
    """Optimiser settings; ``edit`` applies the ``optimize.edit`` overlay."""
    lc = cfg["loss"]
    loss = loss or lc["kind"]
    section = dict(cfg["optimize"])
    omega = lc["omega"]
    if edit:
        section.update(section["edit"])
        omega = section.pop("omega")
    return _build(OptimConfig, section, cfg["seed"], loss=loss, omega=omega,
                  epsilon=lc["epsilon"], rescale_by_inv_omega=lc["rescale_by_inv_omega"],
                  drop_proj_weight=lc["drop_proj_weight"], t_range=tuple(lc["t_range"]),
                  mssds_k=lc["mssds_k"])


def distill_config(cfg: dict) -> DistillConfig:
    return _build(DistillConfig, cfg["translate"], cfg["seed"])
