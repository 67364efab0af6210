"""Synthetic multi-class segmentation data, augmentation, and graymap I/O.

Each sample is a single-channel image in [0, 1] with non-overlapping labeled
shapes (ellipses, rectangles, annuli cycling per class), class-specific
intensities, and additive Gaussian noise. Generation is a pure function of
(spec, index). Images round-trip through 16-bit PGM files, masks through
8-bit PGM, and a plain-text manifest ties (image, mask, split) triples
together.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FileFormatError

SHAPE_FAMILIES = ("ellipse", "rectangle", "annulus")
MANIFEST_HEADER = "dcaunet-manifest v1"


@dataclass
class SynthSpec:
    seed: int = 0
    size: int = 64
    num_classes: int = 4
    noise_std: float = 0.02
    min_shapes: int = 1
    max_shapes: int = 2
    background: float = 0.05

    def __post_init__(self):
        if self.size < 8:
            raise ConfigError(f"canvas size must be >= 8, got {self.size}")
        if self.num_classes < 2:
            raise ConfigError(f"need >= 2 classes (background + 1), got {self.num_classes}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f"bad shape count range [{self.min_shapes}, {self.max_shapes}]")
        levels = self.intensity_levels()
        spacing = np.diff(levels).min() if len(levels) > 1 else 1.0
        if spacing <= 2.0 * self.noise_std:
            raise ConfigError(
                f"{self.num_classes} classes are not distinguishable: intensity spacing "
                f"{spacing:.4f} <= 2 * noise_std {self.noise_std}"
            )

    def intensity_levels(self) -> np.ndarray:
        """Per foreground-class mean intensity, evenly spaced in [0.3, 1.0]."""
        return np.linspace(0.3, 1.0, self.num_classes - 1)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SampleBatch:
    images: np.ndarray  # (B, H, W, 1) floats in [0, 1]
    masks: np.ndarray   # (B, H, W) integer class ids
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise ConfigError(
                f"batch fields disagree: {len(self.images)} images, {len(self.masks)} masks"
            )

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "SampleBatch":
        indices = list(indices)
        return SampleBatch(self.images[indices], self.masks[indices],
                           [self.ids[i] for i in indices])


def _render_shape(rng: np.random.Generator, family: str, size: int) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    ry = rng.integers(size // 10, size // 4) + 1
    rx = rng.integers(size // 10, size // 4) + 1
    cy = rng.integers(ry, size - ry)
    cx = rng.integers(rx, size - rx)
    if family == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if family == "rectangle":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    rho = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return (rho <= 1.0) & (rho > 0.25)


def generate(spec: SynthSpec, index: int) -> tuple:
    """Deterministic (image, mask) for sample ``index``; shapes never overlap."""
    if index < 0:
        raise ConfigError(f"sample index must be >= 0, got {index}")
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    size = spec.size
    mask = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    levels = spec.intensity_levels()
    image = np.full((size, size), spec.background)
    for class_id in range(1, spec.num_classes):
        family = SHAPE_FAMILIES[(class_id - 1) % len(SHAPE_FAMILIES)]
        count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        placed = 0
        attempts = 0
        while placed < count and attempts < 50:
            attempts += 1
            blob = _render_shape(rng, family, size)
            if not blob.any() or (blob & occupied).any():
                continue
            occupied |= blob
            mask[blob] = class_id
            image[blob] = levels[class_id - 1]
            placed += 1
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image[..., None], mask


def generate_batch(spec: SynthSpec, count: int, start: int = 0) -> SampleBatch:
    images, masks, ids = [], [], []
    for i in range(start, start + count):
        image, mask = generate(spec, i)
        images.append(image)
        masks.append(mask)
        ids.append(f"sample_{i:05d}")
    return SampleBatch(np.stack(images), np.stack(masks), ids)


# -- augmentation -------------------------------------------------------------


def rot90_pair(image, mask, quarter_turns: int):
    k = quarter_turns % 4
    return (np.ascontiguousarray(np.rot90(image, k, axes=(0, 1))),
            np.ascontiguousarray(np.rot90(mask, k, axes=(0, 1))))


def flip_pair(image, mask, axis: int):
    return (np.ascontiguousarray(np.flip(image, axis=axis)),
            np.ascontiguousarray(np.flip(mask, axis=axis)))


def rotate_small_pair(image, mask, angle_degrees: float):
    """Small-angle rotation: bilinear for the image, nearest-neighbor for the mask."""
    rotated_image = ndimage.rotate(image, angle_degrees, axes=(1, 0), reshape=False,
                                   order=1, mode="constant", cval=float(image.min()))
    rotated_mask = ndimage.rotate(mask, angle_degrees, axes=(1, 0), reshape=False,
                                  order=0, mode="constant", cval=0)
    return np.clip(rotated_image, 0.0, 1.0), rotated_mask.astype(mask.dtype)


def augment(image, mask, seed) -> tuple:
    """Random right-angle rotation, flips, and occasional small-angle rotation.

    The same transform is applied to image and mask; deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    image, mask = rot90_pair(image, mask, int(rng.integers(0, 4)))
    if rng.random() < 0.5:
        image, mask = flip_pair(image, mask, axis=0)
    if rng.random() < 0.5:
        image, mask = flip_pair(image, mask, axis=1)
    if rng.random() < 0.5:
        angle = float(rng.uniform(-15.0, 15.0))
        image, mask = rotate_small_pair(image, mask, angle)
    return image, mask


# -- portable graymap I/O --------------------------------------------------------


def write_pgm(path, array: np.ndarray, maxval: int = 255) -> None:
    """Binary (P5) graymap; 16-bit values are stored big-endian per the format."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ConfigError(f"PGM stores 2-d arrays, got shape {array.shape}")
    if maxval not in (255, 65535):
        raise ConfigError(f"maxval must be 255 or 65535, got {maxval}")
    if np.issubdtype(array.dtype, np.floating):
        data = np.rint(np.clip(array, 0.0, 1.0) * maxval).astype(np.uint32)
    else:
        data = array.astype(np.uint32)
    if data.max(initial=0) > maxval:
        raise ConfigError(f"values exceed maxval {maxval}")
    dtype = ">u2" if maxval == 65535 else np.uint8
    header = f"P5\n{array.shape[1]} {array.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(data.astype(dtype).tobytes())


def read_pgm(path) -> tuple:
    """Return (array, maxval); uint8 for 8-bit, uint16 for 16-bit files."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FileFormatError(f"{path}: not a binary PGM (missing P5 magic)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        token = raw[pos:end]
        if not token.isdigit():
            raise FileFormatError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
        pos = end
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval not in (255, 65535):
        raise FileFormatError(f"{path}: unsupported maxval {maxval}")
    dtype = ">u2" if maxval == 65535 else np.uint8
    expected = width * height * (2 if maxval == 65535 else 1)
    body = raw[pos:pos + expected]
    if len(body) != expected:
        raise FileFormatError(f"{path}: expected {expected} pixel bytes, got {len(body)}")
    array = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return array.astype(np.uint16 if maxval == 65535 else np.uint8), maxval


def image_to_unit(array: np.ndarray, maxval: int) -> np.ndarray:
    return array.astype(np.float64) / maxval


# -- dataset on disk ---------------------------------------------------------------


def write_dataset(root, spec: SynthSpec, n_train: int, n_val: int) -> Path:
    """Write PGM image/mask pairs plus the manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, count, start in (("train", n_train, 0), ("val", n_val, n_train)):
        for i in range(start, start + count):
            image, mask = generate(spec, i)
            image_rel = f"images/{i:05d}.pgm"
            mask_rel = f"masks/{i:05d}.pgm"
            write_pgm(root / image_rel, image[..., 0], maxval=65535)
            write_pgm(root / mask_rel, mask, maxval=255)
            rows.append((image_rel, mask_rel, split))
    manifest = root / "manifest.tsv"
    with open(manifest, "w", encoding="ascii") as handle:
        handle.write(MANIFEST_HEADER + "\n")
        for row in rows:
            handle.write("\t".join(row) + "\n")
    return manifest


def load_split(manifest_path, split: str, num_classes: int) -> SampleBatch:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileFormatError(f"manifest not found: {manifest_path}")
    lines = manifest_path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FileFormatError(f"{manifest_path}: missing header {MANIFEST_HEADER!r}")
    root = manifest_path.parent
    images, masks, ids = [], [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FileFormatError(f"{manifest_path}: malformed row {line!r}")
        image_rel, mask_rel, row_split = parts
        if row_split != split:
            continue
        image_path, mask_path = root / image_rel, root / mask_rel
        for required in (image_path, mask_path):
            if not required.exists():
                raise FileFormatError(f"missing dataset file: {required}")
        image, maxval = read_pgm(image_path)
        mask, _ = read_pgm(mask_path)
        if mask.max(initial=0) >= num_classes:
            raise FileFormatError(
                f"{mask_path}: label {int(mask.max())} >= num_classes {num_classes}"
            )
        images.append(image_to_unit(image, maxval)[..., None])
        masks.append(mask.astype(np.int64))
        ids.append(os.path.splitext(os.path.basename(image_rel))[0])
    if not images:
        raise FileFormatError(f"{manifest_path}: no rows for split {split!r}")
    return SampleBatch(np.stack(images), np.stack(masks), ids)


def shuffled_indices(count: int, epoch: int, seed: int) -> np.ndarray:
    """Pure function of (epoch, seed): the iteration order for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
    return rng.permutation(count)
