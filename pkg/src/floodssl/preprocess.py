"""Image pipeline: bilateral filter, morphology, resizing, augmentation, one-hot."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .data import Sample


def _replicate_pad(img: np.ndarray, r: int) -> np.ndarray:
    return np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")


def bilateral_filter(img: np.ndarray, diameter: int = 5, sigma_color: float = 0.1,
                     sigma_space: float = 2.0) -> np.ndarray:
    """Edge-preserving smoothing over a square ``diameter`` window.

    The range kernel uses the Euclidean distance between full color vectors,
    so all channels share one weight per neighbor. Borders replicate.
    """
    if diameter < 1 or diameter % 2 == 0:
        raise ValueError("diameter must be a positive odd integer")
    if sigma_color <= 0 or sigma_space <= 0:
        raise ValueError("sigmas must be positive")
    img = np.asarray(img, dtype=np.float64)
    r = diameter // 2
    c, h, w = img.shape
    padded = _replicate_pad(img, r)
    num = np.zeros_like(img)
    den = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[:, r + dy:r + dy + h, r + dx:r + dx + w]
            dist2 = ((shifted - img) ** 2).sum(axis=0)
            wgt = np.exp(-(dy * dy + dx * dx) / (2 * sigma_space ** 2)) \
                * np.exp(-dist2 / (2 * sigma_color ** 2))
            num += wgt * shifted
            den += wgt
    return num / den


def morph(img: np.ndarray, kind: str, iterations: int = 1, size: int = 3) -> np.ndarray:
    """Grey-level dilation (window max) or erosion (window min), square element."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if kind not in ("dilate", "erode"):
        raise ValueError(f"unknown morphology {kind!r}")
    reduce = np.max if kind == "dilate" else np.min
    r = size // 2
    out = np.asarray(img, dtype=np.float64)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[None]
    for _ in range(iterations):
        win = sliding_window_view(_replicate_pad(out, r), (size, size), axis=(1, 2))
        out = reduce(win, axis=(-2, -1))
    return out[0] if squeeze else out


def dilate(img: np.ndarray, iterations: int = 1) -> np.ndarray:
    return morph(img, "dilate", iterations)


def erode(img: np.ndarray, iterations: int = 1) -> np.ndarray:
    return morph(img, "erode", iterations)


def denoise_pipeline(img: np.ndarray) -> np.ndarray:
    """Bilateral filter, then two dilations, then one erosion."""
    return erode(dilate(bilateral_filter(img), 2), 1)


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize(img: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize a C×H×W image (or an H×W mask) with half-pixel-centered sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    arr = np.asarray(img)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    _, h, w = arr.shape
    if mode == "nearest":
        ys = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h), 0, h - 1).astype(int)
        xs = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w), 0, w - 1).astype(int)
        out = arr[:, ys][:, :, xs]
    elif mode == "bilinear":
        sy = np.clip(_source_coords(h, out_h), 0, h - 1)
        sx = np.clip(_source_coords(w, out_w), 0, w - 1)
        y0 = np.floor(sy).astype(int)
        x0 = np.floor(sx).astype(int)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        fy = (sy - y0)[None, :, None]
        fx = (sx - x0)[None, None, :]
        a = arr.astype(np.float64)
        top = a[:, y0][:, :, x0] * (1 - fx) + a[:, y0][:, :, x1] * fx
        bot = a[:, y1][:, :, x0] * (1 - fx) + a[:, y1][:, :, x1] * fx
        out = top * (1 - fy) + bot * fy
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return out[0] if squeeze else out


def one_hot(mask: np.ndarray, n_classes: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size and (mask.min() < 0 or mask.max() >= n_classes):
        raise ValueError(f"mask values must lie in [0, {n_classes})")
    return (np.arange(n_classes).reshape((n_classes,) + (1,) * mask.ndim) == mask).astype(np.float64)


def one_hot_batch(masks: np.ndarray, n_classes: int) -> np.ndarray:
    """N×H×W -> N×C×H×W."""
    return np.stack([one_hot(m, n_classes) for m in masks])


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.0
    p_vflip: float = 0.0
    p_crop: float = 0.0
    crop_min: float = 0.8          # kept fraction of each side
    p_shift: float = 0.0
    max_shift: float = 0.1         # fraction of side length
    p_rotate: float = 0.0
    max_degrees: float = 15.0
    p_scale: float = 0.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    p_brightness_contrast: float = 0.0
    brightness: float = 0.2
    contrast: float = 0.2

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_crop", "p_shift", "p_rotate", "p_scale",
                     "p_brightness_contrast"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if not 0 < self.crop_min <= 1:
            raise ValueError("crop_min must be in (0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be positive and ordered")

    @classmethod
    def classification(cls) -> AugmentConfig:
        # crop, shift, resize, horizontal/vertical flips
        return cls(p_hflip=0.5, p_vflip=0.5, p_crop=0.3, p_shift=0.3, p_scale=0.3)

    @classmethod
    def segmentation(cls) -> AugmentConfig:
        # rotation, scaling, shifting, brightness-contrast
        return cls(p_rotate=0.3, p_scale=0.3, p_shift=0.3, p_brightness_contrast=0.3)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1, :].copy()


def _warp(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    """Apply an output->input affine map to every channel (replicate border)."""
    squeeze = arr.ndim == 2
    a = arr[None] if squeeze else arr
    out = np.stack([ndimage.affine_transform(ch, matrix, offset, order=order, mode="nearest")
                    for ch in a.astype(np.float64)])
    return out[0] if squeeze else out


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Randomly transform a sample; masks follow every geometric step with nearest sampling.

    Each transform consumes the same number of draws whether or not it fires,
    so the rng stream stays aligned across configurations.
    """
    img = sample.image
    mask = sample.mask
    _, h, w = img.shape

    def fire(p: float) -> bool:
        return bool(rng.random() < p)

    if fire(config.p_hflip):
        img = hflip(img)
        mask = None if mask is None else hflip(mask)
    if fire(config.p_vflip):
        img = vflip(img)
        mask = None if mask is None else vflip(mask)

    crop_frac = rng.uniform(config.crop_min, 1.0)
    crop_pos = rng.random(2)
    if fire(config.p_crop) and crop_frac < 1.0:
        ch, cw = max(1, int(round(h * crop_frac))), max(1, int(round(w * crop_frac)))
        y0 = int(crop_pos[0] * (h - ch + 1))
        x0 = int(crop_pos[1] * (w - cw + 1))
        img = resize(img[:, y0:y0 + ch, x0:x0 + cw], h, w, "bilinear")
        if mask is not None:
            mask = resize(mask[y0:y0 + ch, x0:x0 + cw], h, w, "nearest")

    # rotation, scale and shift compose into a single affine warp about the center
    angle = np.deg2rad(rng.uniform(-config.max_degrees, config.max_degrees))
    scale = rng.uniform(*config.scale_range)
    shift = rng.uniform(-config.max_shift, config.max_shift, 2) * np.array([h, w])
    use_rot, use_scale, use_shift = fire(config.p_rotate), fire(config.p_scale), fire(config.p_shift)
    if use_rot or use_scale or use_shift:
        a = angle if use_rot else 0.0
        s = scale if use_scale else 1.0
        t = shift if use_shift else np.zeros(2)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        inv = rot.T / s
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - inv @ (center + t)
        img = _warp(img, inv, offset, order=1)
        if mask is not None:
            mask = np.rint(_warp(mask, inv, offset, order=0)).astype(np.int64)

    b = rng.uniform(-config.brightness, config.brightness)
    c = rng.uniform(-config.contrast, config.contrast)
    if fire(config.p_brightness_contrast):
        img = img * (1.0 + c) + b

    img = np.clip(img, 0.0, 1.0)
    return replace(sample, image=img, mask=mask)
