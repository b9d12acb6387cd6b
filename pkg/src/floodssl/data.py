"""Samples, datasets, PNM/manifest I/O, synthetic generators and samplers."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

SPLITS = ("train", "val", "test")
TASKS = ("classification", "segmentation")

# RGB palette for synthetic segmentation classes; index 0 is the background tint
_PALETTE = np.array([
    [0.45, 0.42, 0.30],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.20],
    [0.80, 0.25, 0.85],
    [0.15, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.10, 0.45],
    [0.95, 0.95, 0.95],
])


@dataclass
class Sample:
    image: np.ndarray                 # C×H×W float64 in [0, 1]
    id: str
    label: int | None = None
    mask: np.ndarray | None = None    # H×W int64 class indices
    labeled: bool = True
    split: str = "train"

    def __post_init__(self):
        has_target = self.label is not None or self.mask is not None
        if self.labeled != has_target:
            raise ValueError(f"sample {self.id}: labeled={self.labeled} but target "
                             f"{'present' if has_target else 'absent'}")


@dataclass
class Dataset:
    samples: list[Sample]
    task: str = "classification"
    n_classes: int = 2
    split: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a dataset")
        for s in self.samples:
            if s.split in ("val", "test") and not s.labeled:
                raise ValueError(f"sample {s.id}: {s.split} samples must be labeled")
            if s.mask is not None and (s.mask.min(initial=0) < 0 or s.mask.max(initial=0) >= self.n_classes):
                raise ValueError(f"sample {s.id}: mask values outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, split: str) -> Dataset:
        return Dataset([s for s in self.samples if s.split == split], self.task, self.n_classes, split)

    def labeled(self) -> list[Sample]:
        return [s for s in self.samples if s.labeled]

    def unlabeled(self) -> list[Sample]:
        return [s for s in self.samples if not s.labeled]


# -- PNM ----------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary P5/P6 file (maxval 255) as C×H×W floats in [0, 1]."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace byte after maxval
    c = 1 if magic == b"P5" else 3
    n = w * h * c
    payload = raw[pos:pos + n]
    if len(payload) != n:
        raise ValueError(f"{path}: truncated PNM payload ({len(payload)} of {n} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    # round half up
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pnm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    body = to_uint8(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body)


def read_mask(path: str | Path) -> np.ndarray:
    """Read a P5 class-index mask (pixel value = class)."""
    img = read_pnm(path)
    if img.shape[0] != 1:
        raise ValueError(f"{path}: masks must be single-channel P5")
    return np.rint(img[0] * 255.0).astype(np.int64)


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError("mask values must fit in 8 bits")
    Path(path).write_bytes(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode()
                           + mask.astype(np.uint8).tobytes())


# -- manifest -----------------------------------------------------------------

MANIFEST_FIELDS = ["id", "split", "image", "label", "mask", "labeled"]


def load_manifest(path: str | Path, n_classes: int | None = None) -> Dataset:
    """Load a CSV manifest; paths inside it are relative to its directory.

    The task is segmentation if any row names a mask. ``n_classes`` defaults
    to 2 for classification and max(mask)+1 for segmentation.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    samples: list[Sample] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return Dataset([], "classification", n_classes or 2)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: header lacks columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=1):
            try:
                samples.append(_parse_row(row, root))
            except (ValueError, OSError) as exc:
                raise ValueError(f"{path}: row {row_no}: {exc}") from exc

    shapes = {s.image.shape for s in samples}
    if len(shapes) > 1:
        raise ValueError(f"{path}: images have inconsistent shapes {sorted(shapes)}")
    seg = any(s.mask is not None for s in samples)
    if seg and any(s.label is not None for s in samples):
        raise ValueError(f"{path}: mixes class labels and masks")
    if n_classes is None:
        n_classes = (max(int(s.mask.max()) for s in samples if s.mask is not None) + 1) if seg else 2
    return Dataset(samples, "segmentation" if seg else "classification", max(n_classes, 2))


def _parse_row(row: dict, root: Path) -> Sample:
    sid = (row.get("id") or "").strip()
    if not sid:
        raise ValueError("empty id")
    split = (row.get("split") or "").strip()
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    flag = (row.get("labeled") or "").strip()
    if flag not in ("0", "1"):
        raise ValueError(f"labeled must be 0 or 1, got {flag!r}")
    image_path = root / (row.get("image") or "").strip()
    if not image_path.is_file():
        raise ValueError(f"image file missing: {image_path}")
    image = read_pnm(image_path)
    label_s = (row.get("label") or "").strip()
    label = int(label_s) if label_s else None
    mask_s = (row.get("mask") or "").strip()
    mask = None
    if mask_s:
        mask_path = root / mask_s
        if not mask_path.is_file():
            raise ValueError(f"mask file missing: {mask_path}")
        mask = read_mask(mask_path)
        if mask.shape != image.shape[1:]:
            raise ValueError(f"mask shape {mask.shape} != image shape {image.shape[1:]}")
    labeled = flag == "1"
    if not labeled:
        label, mask = None, None
    return Sample(image=image, id=sid, label=label, mask=mask, labeled=labeled, split=split)


def write_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write images (P6/P5), masks (P5) and ``manifest.csv`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if dataset.task == "segmentation":
        (root / "masks").mkdir(exist_ok=True)
    rows = []
    for s in dataset.samples:
        ext = "ppm" if s.image.shape[0] == 3 else "pgm"
        img_rel = f"images/{s.id}.{ext}"
        write_pnm(s.image, root / img_rel)
        mask_rel = ""
        if s.mask is not None:
            mask_rel = f"masks/{s.id}.pgm"
            write_mask(s.mask, root / mask_rel)
        rows.append({"id": s.id, "split": s.split, "image": img_rel,
                     "label": "" if s.label is None else str(s.label),
                     "mask": mask_rel, "labeled": "1" if s.labeled else "0"})
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


# -- synthetic data -----------------------------------------------------------

def _quantize(img: np.ndarray) -> np.ndarray:
    return to_uint8(img).astype(np.float64) / 255.0


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 4) -> np.ndarray:
    grid = rng.normal(size=(coarse + 1, coarse + 1))
    return ndimage.zoom(grid, size / (coarse + 1), order=1, mode="nearest")[:size, :size]


def _terrain(rng: np.random.Generator, size: int, base: np.ndarray) -> np.ndarray:
    tint = base + rng.uniform(-0.05, 0.05, 3)
    field_ = _smooth_field(rng, size)
    return tint[:, None, None] + 0.06 * field_[None] + 0.03 * rng.normal(size=(3, size, size))


_WATER = np.array([0.18, 0.30, 0.58])
_LAND = np.array([0.42, 0.45, 0.26])
_MUD = np.array([0.45, 0.38, 0.28])


def _flood_blob(rng: np.random.Generator, size: int, coverage: float) -> np.ndarray:
    cy, cx = rng.uniform(0.25, 0.75, 2) * size
    yy, xx = np.mgrid[0:size, 0:size]
    bump = -((yy - cy) ** 2 + (xx - cx) ** 2) / (0.5 * size) ** 2
    score = 2.0 * bump + 0.6 * _smooth_field(rng, size, 3)
    return score > np.quantile(score, 1.0 - coverage)


def make_classification_sample(rng: np.random.Generator, size: int, flooded: bool) -> np.ndarray:
    img = _terrain(rng, size, _LAND)
    # flood water ranges from clear to muddy
    muddy = rng.uniform(0.0, 0.4)
    water = (1 - muddy) * _WATER + muddy * _MUD + rng.uniform(-0.04, 0.04, 3)
    if flooded:
        region = _flood_blob(rng, size, rng.uniform(0.42, 0.65))
    else:
        # ponds and pools as distractors on most negatives
        region = np.zeros((size, size), bool)
        for _ in range(rng.integers(0, 3)):
            h, w = rng.integers(size // 8, size // 4 + 1, 2)
            y, x = rng.integers(0, size - h), rng.integers(0, size - w)
            region[y:y + h, x:x + w] = True
    wet = water[:, None, None] + 0.03 * rng.normal(size=(3, size, size))
    img = np.where(region[None], wet, img)
    # global illumination
    img = img * rng.uniform(0.85, 1.15)
    return _quantize(np.clip(img, 0.0, 1.0))


def gen_synthetic_classification(n: int, positive_fraction: float, image_size: int = 32,
                                 seed: int = 0, split: str = "train", labeled: bool = True,
                                 id_prefix: str | None = None) -> Dataset:
    """Imbalanced flooded (1) / non-flooded (0) images.

    Exactly round(n * positive_fraction) samples are flooded. Flooded images
    carry a smooth water blob over 42-65% of the pixels; negatives may
    hold small rectangular ponds.
    """
    if not 0 < positive_fraction < 1:
        raise ValueError("positive_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_fraction))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_pos]] = 1
    prefix = id_prefix or f"{split}{'' if labeled else 'u'}"
    samples = []
    for i, y in enumerate(labels):
        img = make_classification_sample(rng, image_size, bool(y))
        samples.append(Sample(img, f"{prefix}_{i:05d}", int(y) if labeled else None,
                              None, labeled, split))
    return Dataset(samples, "classification", 2, split)


def _class_color(c: int, n_classes: int) -> np.ndarray:
    if c < len(_PALETTE):
        return _PALETTE[c]
    return np.random.default_rng(1000 + c).uniform(0.1, 0.9, 3)


def make_segmentation_sample(rng: np.random.Generator, size: int,
                             n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    img = _terrain(rng, size, _class_color(0, n_classes))
    mask = np.zeros((size, size), dtype=np.int64)
    classes = np.arange(1, n_classes)
    # rarer classes further down the list, echoing vehicle/pool scarcity
    probs = 1.0 / np.sqrt(classes)
    probs /= probs.sum()
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 5)):
        c = int(rng.choice(classes, p=probs))
        r = rng.uniform(0.08, 0.22) * size
        cy, cx = rng.uniform(0.1, 0.9, 2) * size
        if rng.random() < 0.5:
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            region = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.5, 1.0))
        color = _class_color(c, n_classes) + rng.uniform(-0.05, 0.05, 3)
        mask[region] = c
        img = np.where(region[None], color[:, None, None], img)
    img = img + 0.03 * rng.normal(size=img.shape)
    return _quantize(np.clip(img, 0.0, 1.0)), mask


def gen_synthetic_segmentation(n: int, n_classes: int, image_size: int = 32, seed: int = 0,
                               split: str = "train", labeled: bool = True,
                               id_prefix: str | None = None) -> Dataset:
    """Background terrain with colored discs and boxes; mask is the exact region class."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    prefix = id_prefix or f"{split}{'' if labeled else 'u'}"
    samples = []
    for i in range(n):
        img, mask = make_segmentation_sample(rng, image_size, n_classes)
        samples.append(Sample(img, f"{prefix}_{i:05d}", None, mask if labeled else None,
                              labeled, split))
    return Dataset(samples, "segmentation", n_classes, split)


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    first = parts[0]
    samples = [s for p in parts for s in p.samples]
    return Dataset(samples, first.task, first.n_classes, None)


# -- sampling -----------------------------------------------------------------

def class_balanced_weights(labels: Sequence[int], n_classes: int = 2) -> np.ndarray:
    """Per-sample weight 1/(count of the sample's class)."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    empty = [c for c in range(n_classes) if counts[c] == 0]
    if empty:
        raise ValueError(f"classes {empty} have no labeled samples")
    return 1.0 / counts[labels]


@dataclass
class SamplerState:
    """With-replacement sampler, probability proportional to ``weights``."""

    weights: np.ndarray
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("sampler weights must be nonnegative and not all zero")
        self.weights = w
        self.rng = np.random.default_rng(self.seed)

    @classmethod
    def balanced(cls, labels: Sequence[int], n_classes: int = 2, seed: int = 0) -> SamplerState:
        return cls(class_balanced_weights(labels, n_classes), seed)

    @classmethod
    def uniform(cls, n: int, seed: int = 0) -> SamplerState:
        return cls(np.ones(n), seed)


def weighted_sample_batch(batch_size: int, state: SamplerState) -> np.ndarray:
    p = state.weights / state.weights.sum()
    return state.rng.choice(len(p), size=batch_size, replace=True, p=p)


def subsample_unlabeled(pool: Sequence, ratio_denominator: int = 10, seed: int = 0,
                        epoch: int = 0) -> list:
    """Draw ceil(len(pool)/ratio) items without replacement, fixed by (seed, epoch)."""
    if len(pool) == 0:
        raise ValueError("unlabeled pool is empty")
    if ratio_denominator < 1:
        raise ValueError("ratio_denominator must be >= 1")
    k = math.ceil(len(pool) / ratio_denominator)
    rng = np.random.default_rng([seed, epoch])
    picked = np.sort(rng.choice(len(pool), size=k, replace=False))
    return [pool[i] for i in picked]


def with_image(sample: Sample, image: np.ndarray, mask: np.ndarray | None = None) -> Sample:
    return replace(sample, image=image, mask=sample.mask if mask is None else mask)
