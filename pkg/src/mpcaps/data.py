"""Datasets: MNIST IDX files, the face/noise toy set, and external feature files.

File formats (all little-endian unless noted):

* IDX (big-endian): ``u32 magic`` (0x00000803 images, 0x00000801 labels),
  ``u32`` extents, then raw ``u8`` values.
* Feature file: ``b"MPCF"``, ``u32 version`` (1), ``u8 dtype`` (1 = float32),
  ``u8 rank``, ``rank x u32`` extents, row-major ``f32`` payload.
* Label sidecar: ``u32 count``, ``count x u8`` labels, ``count x u8`` part
  labels (255 where an image has no part label).
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, InvalidArgument, LengthError
from .numerics import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FEATURE_MAGIC = b"MPCF"
FEATURE_VERSION = 1
DTYPE_F32 = 1
NO_PART = 255


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,)
    n_classes: int
    part_labels: np.ndarray | None = None  # (N,), -1 where absent
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConsistencyError(f"labels outside 0..{self.n_classes - 1}")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        parts = None if self.part_labels is None else self.part_labels[idx]
        meta = {k: v[idx] for k, v in self.meta.items()}
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, parts, meta)


# --- IDX -------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{what}: file too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{what}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    count = int(np.prod(dims))
    if len(payload) != count:
        raise LengthError(f"{what}: payload has {len(payload)} bytes, header says {count}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), n_classes)


# --- feature files -----------------------------------------------------------

def write_features(path, tensor: np.ndarray) -> None:
    tensor = np.ascontiguousarray(tensor, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<IBB", FEATURE_VERSION, DTYPE_F32, tensor.ndim)
    header += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
    Path(path).write_bytes(header + tensor.tobytes())


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    version, dtype, rank = struct.unpack("<IBB", raw[4:10])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype}")
    end = 10 + 4 * rank
    if len(raw) < end:
        raise LengthError(f"{path}: truncated header")
    extents = struct.unpack(f"<{rank}I", raw[10:end])
    if rank == 0 or min(extents) < 1:
        raise FormatError(f"{path}: invalid extents {extents}")
    expected = 4 * int(np.prod(extents))
    if len(raw) - end != expected:
        raise LengthError(f"{path}: payload has {len(raw) - end} bytes, extents need {expected}")
    return np.frombuffer(raw[end:], dtype="<f4").reshape(extents).astype(np.float32)


def write_labels(path, labels, part_labels=None) -> None:
    labels = np.asarray(labels)
    parts = np.full(len(labels), NO_PART) if part_labels is None else np.asarray(part_labels)
    parts = np.where(parts < 0, NO_PART, parts)
    if labels.max(initial=0) > 254 or parts.max(initial=0) > NO_PART:
        raise InvalidArgument("labels must fit in a byte")
    Path(path).write_bytes(struct.pack("<I", len(labels)) + labels.astype(np.uint8).tobytes()
                           + parts.astype(np.uint8).tobytes())


def load_labels(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise LengthError(f"{path}: truncated label file")
    (count,) = struct.unpack("<I", raw[:4])
    if len(raw) != 4 + 2 * count:
        raise LengthError(f"{path}: expected {4 + 2 * count} bytes, found {len(raw)}")
    labels = np.frombuffer(raw[4:4 + count], dtype=np.uint8).astype(np.int64)
    parts = np.frombuffer(raw[4 + count:], dtype=np.uint8).astype(np.int64)
    parts = np.where(parts == NO_PART, -1, parts)
    return labels, parts


def save_dataset(ds: Dataset, directory) -> None:
    """Write ``images.mpcf`` and ``labels.bin`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_features(directory / "images.mpcf", ds.images)
    write_labels(directory / "labels.bin", ds.labels, ds.part_labels)


def load_dataset(directory, n_classes: int | None = None) -> Dataset:
    directory = Path(directory)
    x = load_features(directory / "images.mpcf")
    labels, parts = load_labels(directory / "labels.bin")
    if len(labels) != len(x):
        raise ConsistencyError(f"{len(x)} tensors but {len(labels)} labels")
    if x.ndim != 4:
        raise FormatError(f"expected a rank-4 tensor (N, C, H, W), got rank {x.ndim}")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    has_parts = bool(np.any(parts >= 0))
    return Dataset(x, labels, n_classes, parts if has_parts else None)


# --- toy face / noise set -----------------------------------------------------

FACE, NOISE = 0, 1
EYE_CENTERS = ((22.0, 20.0), (22.0, 44.0))
EYE_RADIUS = 7  # glyph half-extent at scale 1.0


@dataclass(frozen=True)
class ToyConfig:
    per_class: int = 600
    image_size: int = 64
    shift_max: float = 3.0
    scale_range: tuple = (0.7, 1.0)
    dropout_patches: int = 5
    patch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidArgument(f"invalid scale range {self.scale_range}")
        if self.patch_size > self.image_size or self.patch_size < 1:
            raise InvalidArgument(f"patch {self.patch_size} does not fit a {self.image_size} image")
        if self.per_class < 1 or self.shift_max < 0 or self.dropout_patches < 0:
            raise InvalidArgument(f"invalid toy config {self}")
        span = EYE_RADIUS * hi + self.shift_max
        for cy, cx in EYE_CENTERS:
            if min(cy, cx) - span < 0 or max(cy, cx) + span > self.image_size - 1:
                raise InvalidArgument(f"eyes do not fit a {self.image_size} image with these bounds")


def eye_box(eye: int, cfg: ToyConfig = ToyConfig()):
    """Row/column slices covering every possible placement of one eye."""
    cy, cx = EYE_CENTERS[eye]
    r = int(np.ceil(EYE_RADIUS * cfg.scale_range[1] + cfg.shift_max)) + 1
    return slice(int(cy) - r, int(cy) + r + 1), slice(int(cx) - r, int(cx) + r + 1)


def _eye_mask(rows, cols, cy, cx, scale, prototype):
    dy = (rows - cy) / scale
    dx = (cols - cx) / scale
    if prototype == 0:
        # open ring with a solid pupil
        r = np.hypot(dy, dx)
        return (np.abs(r - 5.6) <= 0.9) | (r <= 2.2)
    # slit with an eyebrow bar above it
    slit = (np.abs(dy) <= 1.0) & (np.abs(dx) <= 6.5)
    brow = (dy >= -6.5) & (dy <= -4.5) & (np.abs(dx) <= 5.5)
    return slit | brow


def _static_parts(size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    mid = size / 2.0
    nose = ((np.abs(cols - mid) <= 1.0) & (rows >= 28) & (rows <= 38)) | (
        (rows >= 38) & (rows <= 40) & (np.abs(cols - mid) <= 3.5))
    dist = np.hypot(rows - 36.0, cols - mid)
    mouth = (np.abs(dist - 13.0) <= 1.0) & (rows >= 44) & (np.abs(cols - mid) <= 11)
    return (nose | mouth).astype(np.float32)


def generate_toy(cfg: ToyConfig = ToyConfig()) -> Dataset:
    """Face class (label 0) and uniform-noise class (label 1), ``per_class`` each.

    Every face draws one eye prototype (its part label) used for both eyes;
    each eye is shifted and scaled independently, then ``dropout_patches``
    square patches are zeroed. ``meta`` records the eye placements.
    """
    rng = Rng(cfg.seed)
    size = cfg.image_size
    n = cfg.per_class
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    static = _static_parts(size)
    faces = np.empty((n, size, size), dtype=np.float32)
    prototypes = rng.integers(0, 2, size=n)
    shifts = rng.uniform(-cfg.shift_max, cfg.shift_max, size=(n, 2, 2))
    scales = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=(n, 2))
    corners = rng.integers(0, size - cfg.patch_size + 1, size=(n, cfg.dropout_patches, 2))
    for i in range(n):
        img = static.copy()
        for e, (cy, cx) in enumerate(EYE_CENTERS):
            mask = _eye_mask(rows, cols, cy + shifts[i, e, 0], cx + shifts[i, e, 1],
                             scales[i, e], prototypes[i])
            img[mask] = 1.0
        for r0, c0 in corners[i]:
            img[r0:r0 + cfg.patch_size, c0:c0 + cfg.patch_size] = 0.0
        faces[i] = img
    noise = rng.uniform(size=(n, size, size)).astype(np.float32)
    images = np.concatenate([faces, noise])[:, None]
    labels = np.concatenate([np.full(n, FACE), np.full(n, NOISE)])
    parts = np.concatenate([prototypes, np.full(n, -1)])
    nan = np.full((n, 2, 2), np.nan)
    meta = {
        "eye_shift": np.concatenate([shifts, nan]),
        "eye_scale": np.concatenate([scales, nan[:, :, 0]]),
    }
    return Dataset(images, labels, 2, parts, meta)


# --- batching ----------------------------------------------------------------

def batch_iter(ds: Dataset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
    """Yield ``(indices, images, labels)``; the permutation depends on (seed, epoch)."""
    if batch_size < 1:
        raise InvalidArgument(f"batch size must be >= 1, got {batch_size}")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = Rng(shuffle_seed).spawn(epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield idx, ds.images[idx], ds.labels[idx]
