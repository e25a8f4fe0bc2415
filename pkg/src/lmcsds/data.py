"""Procedural shape datasets, IDX ingestion and the checkpoint container.

Images are float32 arrays laid out ``(N, C, H, W)`` with values in ``[-1, 1]``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    CorruptionError,
    DataFormatError,
    InconsistencyError,
    UnsupportedClassCount,
    ValidationError,
    VersionError,
)

SHAPE_FAMILIES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "star",
    "crescent",
    "bar",
    "dot-grid",
    "frame",
)
SUPPORTED_SIZES = (28, 32, 64)
_SUPERSAMPLE = 4


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InconsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, split: str | None = None) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(
            self.images[index], self.labels[index], self.num_classes, split or self.split
        )

    def of_class(self, label: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == label))


# --------------------------------------------------------------------------
# procedural shapes


def _polygon_mask(u: np.ndarray, v: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorised over the sample grid."""
    inside = np.zeros(u.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > v) != (y2 > v)
        x_at = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (u < x_at)
    return inside


def _regular_polygon(sides: int, radius: float, phase: float = np.pi / 2) -> np.ndarray:
    ang = phase + 2 * np.pi * np.arange(sides) / sides
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def _star_vertices() -> np.ndarray:
    ang = np.pi / 2 + np.pi * np.arange(10) / 5
    r = np.where(np.arange(10) % 2 == 0, 1.0, 0.42)
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


_TRIANGLE = _regular_polygon(3, 1.05, np.pi / 2)
_STAR = _star_vertices()
_CROSS = np.array(
    [
        [-0.3, 1.0], [0.3, 1.0], [0.3, 0.3], [1.0, 0.3], [1.0, -0.3], [0.3, -0.3],
        [0.3, -1.0], [-0.3, -1.0], [-0.3, -0.3], [-1.0, -0.3], [-1.0, 0.3], [-0.3, 0.3],
    ]
)


def _shape_mask(family: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    name = SHAPE_FAMILIES[family]
    if name == "circle":
        return r < 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.8
    if name == "triangle":
        return _polygon_mask(u, v, _TRIANGLE)
    if name == "cross":
        return _polygon_mask(u, v, _CROSS)
    if name == "ring":
        return (r < 1.0) & (r > 0.6)
    if name == "star":
        return _polygon_mask(u, v, _STAR)
    if name == "crescent":
        return (r < 1.0) & (np.hypot(u - 0.45, v) > 0.8)
    if name == "bar":
        return (np.abs(u) < 1.0) & (np.abs(v) < 0.28)
    if name == "dot-grid":
        gu = u - np.clip(np.round(u / 0.66), -1, 1) * 0.66
        gv = v - np.clip(np.round(v / 0.66), -1, 1) * 0.66
        return np.hypot(gu, gv) < 0.22
    if name == "frame":
        m = np.maximum(np.abs(u), np.abs(v))
        return (m < 0.9) & (m > 0.6)
    raise AssertionError(name)


def _render(family: int, size: int, cx: float, cy: float, radius: float,
            angle: float, fg: float, bg: float) -> np.ndarray:
    n = size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - cx) / radius, (cy - yy) / radius
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    mask = _shape_mask(family, u, v).astype(np.float64)
    cover = mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
    return bg + (fg - bg) * cover


def gen_shapes(seed: int, count: int, classes: int, size: int = 32) -> LabeledDataset:
    """Deterministic dataset of ``count`` single-channel shape images.

    Labels cycle through ``range(classes)`` before shuffling, so every class
    appears ``count // classes`` or one more times.
    """
    if classes > len(SHAPE_FAMILIES):
        raise UnsupportedClassCount(f"at most {len(SHAPE_FAMILIES)} classes, got {classes}")
    if classes < 1:
        raise ValidationError("classes must be >= 1")
    if size not in SUPPORTED_SIZES:
        raise ValidationError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    if count < classes:
        raise ValidationError(f"count ({count}) must be >= classes ({classes})")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % classes)
    images = np.empty((count, 1, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        radius = size * rng.uniform(0.22, 0.38)
        margin = radius * 0.85
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        angle = rng.uniform(0.0, 2 * np.pi)
        fg = rng.uniform(0.2, 1.0)
        bg = rng.uniform(-1.0, -0.4)
        images[i, 0] = _render(int(label), size, cx, cy, radius, angle, fg, bg)
    return LabeledDataset(images, labels, classes)


def train_heldout_split(data: LabeledDataset, heldout_fraction: float = 0.05,
                        seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint split covering the whole dataset."""
    if not 0.0 < heldout_fraction < 1.0:
        raise ValidationError("heldout_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(data))
    n_held = max(1, int(round(heldout_fraction * len(data))))
    return (
        data.subset(np.sort(order[n_held:]), "train"),
        data.subset(np.sort(order[:n_held]), "heldout"),
    )


# --------------------------------------------------------------------------
# IDX files

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise InconsistencyError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != expected:
        raise InconsistencyError(
            f"{path}: header declares {expected} bytes of payload, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; bytes map linearly from [0, 255] to [-1, 1]."""
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(pixels) != len(labels):
        raise InconsistencyError(f"{len(pixels)} images but {len(labels)} labels")
    images = pixels.astype(np.float32)[:, None] * np.float32(2.0 / 255.0) - np.float32(1.0)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 1)
    return LabeledDataset(images, labels.astype(np.int64), k)


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the IDX pixel map, rounding to the nearest byte."""
    q = np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def write_idx(data: LabeledDataset, images_path, labels_path) -> None:
    if data.images.shape[1] != 1:
        raise ValidationError("IDX export supports single-channel images only")
    n, _, h, w = data.images.shape
    pixels = to_bytes(data.images[:, 0])
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    )


# --------------------------------------------------------------------------
# checkpoint container
#
# layout (little endian):
#   b"LMCD0001" | u32 version | u32 tensor count |
#   per tensor: u32 name length, utf-8 name, u8 dtype tag, u8 rank, u32 dims..., payload |
#   u32 crc32 of everything before it

CHECKPOINT_MAGIC = b"LMCD0001"
CHECKPOINT_VERSION = 1
_META_NAME = "__meta__"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("int64"): 3}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors: dict[str, np.ndarray] = dict(ckpt.tensors)
    if ckpt.metadata:
        meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":"))
        tensors[_META_NAME] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise ValidationError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError("not an LMCD checkpoint")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    offset = 16
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = body[offset:offset + n].decode("utf-8")
            offset += n
            tag, rank = struct.unpack_from("<BB", body, offset)
            offset += 2
            shape = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(body):
                raise CorruptionError(f"tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype, count=nbytes // dtype.itemsize,
                                          offset=offset).reshape(shape).copy()
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"malformed tensor table: {exc}") from exc
    if offset != len(body):
        raise CorruptionError("trailing bytes after tensor table")
    meta = {}
    if _META_NAME in tensors:
        meta = json.loads(tensors.pop(_META_NAME).tobytes().decode("utf-8"))
    return Checkpoint(tensors, meta, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def dataset_checkpoint(data: LabeledDataset) -> Checkpoint:
    return Checkpoint(
        {"images": data.images, "labels": data.labels},
        {"num_classes": data.num_classes, "split": data.split},
    )


def dataset_from_checkpoint(ckpt: Checkpoint) -> LabeledDataset:
    meta: Mapping = ckpt.metadata
    return LabeledDataset(ckpt.tensors["images"], ckpt.tensors["labels"],
                          int(meta["num_classes"]), meta.get("split", "train"))
