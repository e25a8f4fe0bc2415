"""Image statistics, a frozen probe classifier used for proxy metrics, and
gradient diagnostics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Checkpoint, LabeledDataset
from .errors import ProbeQualityError, ValidationError
from .nets import as_batch, load_module_state, module_to_checkpoint, seeded_init, to_torch

log = logging.getLogger(__name__)

HIST_BINS = 41
HIST_RANGE = (-2.0, 2.0)
HIST_EDGES = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)


@dataclass
class ImageStats:
    spectrum: np.ndarray
    band_ratio: float
    histogram: np.ndarray
    frequencies: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "frequencies": self.frequencies.tolist(),
            "log_power": self.spectrum.tolist(),
            "band_ratio": self.band_ratio,
            "derivative_histogram": self.histogram.tolist(),
            "histogram_edges": HIST_EDGES.tolist(),
        }


def _power(images: np.ndarray) -> np.ndarray:
    """Mean 2D power spectrum over images and channels, DC removed per image."""
    x = images - images.mean(axis=(-2, -1), keepdims=True)
    p = np.abs(np.fft.fft2(x)) ** 2
    return p.reshape(-1, *p.shape[-2:]).mean(axis=0)


def power_spectrum_2d(images, keep_dc: bool = True) -> np.ndarray:
    """Mean 2D power spectrum, zero frequency shifted to the centre."""
    images = as_batch(np.asarray(images, dtype=np.float64))[0]
    if keep_dc:
        p = np.abs(np.fft.fft2(images)) ** 2
        p = p.reshape(-1, *p.shape[-2:]).mean(axis=0)
    else:
        p = _power(images)
    return np.fft.fftshift(p)


def _radius(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fy ** 2 + fx ** 2)


def band_ratio(images) -> float:
    """Share of non-DC power at radial frequency above half Nyquist (0.25 cycles/px)."""
    images = as_batch(np.asarray(images, dtype=np.float64))[0]
    p = _power(images)
    total = p.sum()
    if total <= 0:
        return 0.0
    return float(p[_radius(*p.shape) > 0.25].sum() / total)


def radial_spectrum(images) -> tuple[np.ndarray, np.ndarray]:
    """Radially averaged log10 power on integer-radius bins 1..N/2."""
    images = as_batch(np.asarray(images, dtype=np.float64))[0]
    p = _power(images)
    h, w = p.shape
    r = np.rint(_radius(h, w) * min(h, w)).astype(int)
    nbins = min(h, w) // 2
    sums = np.bincount(r.ravel(), p.ravel(), minlength=nbins + 1)[1:nbins + 1]
    counts = np.bincount(r.ravel(), minlength=nbins + 1)[1:nbins + 1]
    mean = sums / counts
    return np.arange(1, nbins + 1) / min(h, w), np.log10(np.maximum(mean, 1e-30))


def derivative_histogram(images) -> np.ndarray:
    """Normalised histogram of vertical differences on fixed bins over [-2, 2];
    out-of-range values fall into the edge bins."""
    images = as_batch(np.asarray(images, dtype=np.float64))[0]
    d = np.diff(images, axis=-2).ravel()
    d = np.clip(d, HIST_RANGE[0], HIST_RANGE[1])
    counts, _ = np.histogram(d, bins=HIST_EDGES)
    return counts / max(counts.sum(), 1)


def image_stats(images) -> ImageStats:
    images = np.asarray(images)
    if images.size == 0:
        raise ValidationError("image_stats needs at least one image")
    freqs, spec = radial_spectrum(images)
    return ImageStats(spec, band_ratio(images), derivative_histogram(images), freqs)


def gaussian_blur(images, sigma: float = 1.0, size: int = 5) -> np.ndarray:
    """Separable normalised Gaussian blur with reflect padding."""
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    images = np.asarray(images, dtype=np.float64)
    pad = size // 2
    widths = [(0, 0)] * (images.ndim - 2) + [(pad, pad), (pad, pad)]
    p = np.pad(images, widths, mode="reflect")
    h, w = images.shape[-2:]
    out = sum(k[i] * p[..., i:i + h, :] for i in range(size))
    return sum(k[i] * out[..., :, i:i + w] for i in range(size))


def pairwise_diversity(images) -> float:
    """Mean per-pixel RMS distance over unordered pairs."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise ValidationError("need at least two images")
    flat = images.reshape(len(images), -1)
    dists = [np.sqrt(np.mean((flat[i] - flat[j]) ** 2))
             for i in range(len(flat)) for j in range(i + 1, len(flat))]
    return float(np.mean(dists))


# --------------------------------------------------------------------------
# probe classifier


class ProbeNet(nn.Module):
    def __init__(self, channels: int, num_classes: int, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveMaxPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        f = self.features(x)
        return self.head(f), f


@dataclass
class ProbeConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    width: int = 16
    min_accuracy: float = 0.9
    noise_aug: float = 0.1
    seed: int = 0
    shuffle_labels: bool = False


class ProbeClassifier:
    """Frozen classifier; exposes logits and the pooled feature vector."""

    def __init__(self, net: ProbeNet, num_classes: int):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.num_classes = num_classes

    @torch.no_grad()
    def logits_and_features(self, images, batch_size: int = 512):
        x, single = as_batch(np.asarray(images))
        outs, feats = [], []
        for s in range(0, len(x), batch_size):
            o, f = self.net(to_torch(np.clip(x[s:s + batch_size], -1.5, 1.5)))
            outs.append(o.numpy().astype(np.float64))
            feats.append(f.numpy().astype(np.float64))
        o, f = np.concatenate(outs), np.concatenate(feats)
        return (o[0], f[0]) if single else (o, f)

    def logits(self, images):
        return self.logits_and_features(images)[0]

    def features(self, images):
        return self.logits_and_features(images)[1]

    def scores(self, images, classes) -> np.ndarray:
        """Softmax probability of ``classes`` (one per image)."""
        lg = np.atleast_2d(self.logits(images))
        p = np.exp(lg - lg.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        classes = np.broadcast_to(np.asarray(classes), (len(p),))
        return p[np.arange(len(p)), classes]

    def accuracy(self, data: LabeledDataset) -> float:
        return retrieval_accuracy(self, data.images, data.labels)

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        meta = {"kind": "probe", "num_classes": self.num_classes,
                "channels": self.net.features[0].in_channels,
                "width": self.net.features[0].out_channels}
        meta.update(extra or {})
        return module_to_checkpoint(self.net, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ProbeClassifier":
        meta = ckpt.metadata
        if meta.get("kind") != "probe":
            raise ValidationError("checkpoint does not hold a probe classifier")
        net = ProbeNet(int(meta["channels"]), int(meta["num_classes"]), int(meta["width"]))
        load_module_state(net, ckpt)
        return cls(net, int(meta["num_classes"]))


def train_probe(train: LabeledDataset, heldout: LabeledDataset,
                cfg: ProbeConfig | None = None) -> ProbeClassifier:
    """Train, freeze and quality-gate the probe on held-out accuracy."""
    cfg = cfg or ProbeConfig()
    rng = np.random.default_rng(cfg.seed)
    labels = rng.permutation(train.labels) if cfg.shuffle_labels else train.labels
    channels = train.images.shape[1]
    net = seeded_init(lambda: ProbeNet(channels, train.num_classes, cfg.width), cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    net.train()
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(train), cfg.batch_size)
        x = train.images[idx] + cfg.noise_aug * rng.standard_normal(train.images[idx].shape)
        logits, _ = net(to_torch(x))
        loss = F.cross_entropy(logits, torch.from_numpy(labels[idx]))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    probe = ProbeClassifier(net, train.num_classes)
    acc = probe.accuracy(heldout)
    log.info("probe held-out accuracy %.3f", acc)
    if acc < cfg.min_accuracy:
        raise ProbeQualityError(
            f"probe held-out accuracy {acc:.3f} below {cfg.min_accuracy}; metrics would be meaningless")
    return probe


def retrieval_accuracy(probe: ProbeClassifier, images, intended_classes,
                       candidates: Sequence[int] | None = None) -> float:
    """Fraction of images whose arg-max class equals the intended one.

    With ``candidates`` the arg-max is taken over that subset only, so chance
    level is ``1 / len(candidates)``.
    """
    logits = np.atleast_2d(probe.logits(images))
    intended = np.broadcast_to(np.asarray(intended_classes), (len(logits),))
    if candidates is None:
        pred = logits.argmax(axis=1)
    else:
        cand = np.asarray(candidates)
        pred = cand[logits[:, cand].argmax(axis=1)]
    return float(np.mean(pred == intended))


def feature_distance(probe: ProbeClassifier, a, b) -> np.ndarray | float:
    fa, fb = probe.features(a), probe.features(b)
    d = np.sqrt(np.sum((fa - fb) ** 2, axis=-1))
    return float(d) if np.ndim(d) == 0 else d


# --------------------------------------------------------------------------
# gradient checks


@dataclass
class GradcheckReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.get("passed", True) for c in self.checks.values())

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, **self.checks}, indent=2, sort_keys=True)


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def decomposition_check(denoiser, trials: int = 100, seed: int = 0, size: int = 32) -> float:
    """Worst relative gap between the SDS gradient and its two components."""
    from .losses import LossConfig, grad_sds

    rng = np.random.default_rng(seed)
    worst = 0.0
    c = denoiser.arch.channels
    for _ in range(trials):
        z = rng.uniform(-1, 1, (c, size, size))
        eps = rng.standard_normal(z.shape)
        t = rng.uniform(0.02, 0.98)
        omega = rng.uniform(1.0, 20.0)
        y = int(rng.integers(0, denoiser.num_classes))
        cfg = LossConfig(omega=omega, rescale_by_inv_omega=False)
        r = grad_sds(denoiser, z, y, t, cfg, eps=eps)
        worst = max(worst, _rel(r.grad, r.components["cond"] + r.components["proj"]))
    return worst


def x0_form_check(denoiser, trials: int = 20, seed: int = 1, size: int = 32) -> float:
    """Worst relative gap between the noise-space and image-space projection terms."""
    from .losses import LossConfig, grad_proj, grad_proj_x0

    rng = np.random.default_rng(seed)
    cfg = LossConfig(drop_proj_weight=False)
    worst = 0.0
    for _ in range(trials):
        z = rng.uniform(-1, 1, (denoiser.arch.channels, size, size))
        eps = rng.standard_normal(z.shape)
        t = rng.uniform(0.02, 0.98)
        a = grad_proj(denoiser, z, None, t, cfg, eps=eps).grad
        b = grad_proj_x0(denoiser, z, None, t, cfg, eps=eps).grad
        worst = max(worst, _rel(a, b))
    return worst


def full_backprop_comparison(denoiser, y: int = 0, omega: float = 3.0, t: float = 0.5,
                             seed: int = 0, size: int = 32) -> dict:
    """Cosine similarity and norm ratio of the full diffusion-loss gradient
    (through the network) versus the gradient with the network Jacobian dropped."""
    from .diffusion import diffuse
    from .losses import LossConfig, grad_sds

    rng = np.random.default_rng(seed)
    c = denoiser.arch.channels
    z = rng.uniform(-1, 1, (1, c, size, size))
    eps = rng.standard_normal(z.shape)
    a = float(denoiser.schedule.alpha_bar(t))
    zt = torch.tensor(z, dtype=torch.float32, requires_grad=True)
    z_t = np.sqrt(a) * zt + np.sqrt(1 - a) * to_torch(eps)
    tt = torch.full((1,), t)
    net = denoiser.net
    ec = net(z_t, torch.tensor([y]), tt)
    eu = net(z_t, torch.tensor([denoiser.num_classes]), tt)
    e_w = omega * ec + (1 - omega) * eu
    loss = 0.5 * ((e_w - to_torch(eps)) ** 2).sum()
    (full,) = torch.autograd.grad(loss, zt)
    full = full.numpy().astype(np.float64)
    approx = grad_sds(denoiser, z, y, t, LossConfig(omega=omega, rescale_by_inv_omega=False),
                      eps=eps).grad
    cos = float(np.sum(full * approx) / (np.linalg.norm(full) * np.linalg.norm(approx)))
    assert np.allclose(diffuse(z, eps, a), z_t.detach().numpy(), atol=1e-5)
    return {"cosine": cos, "norm_ratio": float(np.linalg.norm(full) / np.linalg.norm(approx))}


def gradcheck(denoiser, tiny_denoiser=None, trials: int = 100, seed: int = 0,
              decomposition_tol: float = 1e-6, x0_tol: float = 1e-5,
              pullback_tol: float = 1e-3) -> GradcheckReport:
    """Identity checks (decomposition, image-space projection form, pullback
    adjointness) plus an informational full-backprop comparison."""
    from .optimize import DirectPixels, LatentGrid, finite_difference_check

    rep = GradcheckReport()
    worst = decomposition_check(denoiser, trials, seed)
    rep.checks["decomposition"] = {"max_rel_err": worst, "tol": decomposition_tol,
                                   "passed": worst <= decomposition_tol}
    worst = x0_form_check(denoiser, max(1, trials // 5), seed + 1)
    rep.checks["x0_form"] = {"max_rel_err": worst, "tol": x0_tol, "passed": worst <= x0_tol}
    rng = np.random.default_rng(seed)
    c = denoiser.arch.channels
    for name, param in (("latent_grid", LatentGrid(c, 8, 32)), ("direct_pixels", DirectPixels(c, 8))):
        theta = rng.standard_normal(param.init_constant(0.0).shape)
        weights = rng.uniform(0.5, 1.5, param.canvas_shape)
        worst = finite_difference_check(param, theta, weights, h=1e-3, seed=seed)
        rep.checks[f"pullback_{name}"] = {"max_rel_err": worst, "tol": pullback_tol,
                                          "passed": worst <= pullback_tol}
    fb = full_backprop_comparison(tiny_denoiser or denoiser, seed=seed)
    fb["informational"] = True
    rep.checks["full_backprop"] = fb
    return rep


# --------------------------------------------------------------------------
# export


def to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)
    return np.clip(np.rint((np.clip(img, -1, 1) + 1) * 127.5), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(Path(path), format="PNG", optimize=False)


def save_grid_png(images: Sequence[np.ndarray], path, cols: int = 8) -> None:
    imgs = [to_uint8(im) for im in images]
    h, w = imgs[0].shape[:2]
    rows = (len(imgs) + cols - 1) // cols
    grid = np.zeros((rows * h, cols * w) + imgs[0].shape[2:], dtype=np.uint8)
    for i, im in enumerate(imgs):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = im
    from PIL import Image

    Image.fromarray(grid).save(Path(path), format="PNG", optimize=False)


def plot_stats(stats: dict[str, ImageStats], path) -> None:
    """Spectra and log-count derivative histograms side by side."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    centers = 0.5 * (HIST_EDGES[1:] + HIST_EDGES[:-1])
    for name, s in stats.items():
        ax1.plot(s.frequencies, s.spectrum, label=name)
        ax2.semilogy(centers, np.maximum(s.histogram, 1e-8), label=name)
    ax1.set_xlabel("cycles / pixel")
    ax1.set_ylabel("log10 power")
    ax2.set_xlabel("vertical derivative")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(path), metadata={"Software": None})
    plt.close(fig)


def stats_summary(stats: dict[str, ImageStats]) -> dict:
    return {k: asdict(v) | {"spectrum": v.spectrum.tolist(), "histogram": v.histogram.tolist(),
                            "frequencies": v.frequencies.tolist()} for k, v in stats.items()}
