"""Stochastic volume transforms used to build the two pretraining views.

Each transform takes a float volume (S, H, W) with values in [0, 1], an
:class:`AugmentConfig` and a ``numpy.random.Generator``; it returns a new array
and never mutates its input. :func:`make_view` chains them in a fixed order and
records every sampled parameter.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from .voldata import GeometryError


@dataclass(frozen=True)
class AugmentConfig:
    output_shape: tuple[int, int, int] = (16, 64, 64)
    crop_area_range: tuple[float, float] = (0.4, 0.8)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness_range: tuple[float, float] = (0.6, 1.4)
    contrast_range: tuple[float, float] = (0.6, 1.4)
    blur_prob: float = 1.0
    blur_kernel: int = 21
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    solarize_threshold: float = 0.42
    solarize_prob: float = 0.2
    slice_shift_max: int = 5

    def __post_init__(self):
        for name in ("output_shape", "crop_area_range", "aspect_range", "brightness_range",
                     "contrast_range", "blur_sigma_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.crop_area_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_area_range must satisfy 0 < low <= high <= 1, got {(lo, hi)}")
        if not 0 < self.aspect_range[0] <= self.aspect_range[1]:
            raise ValueError(f"invalid aspect_range {self.aspect_range}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError(f"blur_kernel must be a positive odd integer, got {self.blur_kernel}")
        if self.slice_shift_max < 0:
            raise ValueError("slice_shift_max must be >= 0")
        for name in ("hflip_prob", "jitter_prob", "blur_prob", "solarize_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if len(self.output_shape) != 3 or min(self.output_shape) < 1:
            raise ValueError(f"invalid output_shape {self.output_shape}")


@dataclass
class View:
    voxels: np.ndarray
    applied_ops: dict[str, Any] = field(default_factory=dict)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; stable across processes."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, (int, np.integer)):
            words.append(int(k) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(k).encode()))
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# individual transforms; the ``_apply`` variants take explicit parameters


def sample_crop(shape_hw, cfg: AugmentConfig, rng) -> dict:
    h, w = shape_hw
    area = float(rng.uniform(*cfg.crop_area_range))
    aspect = float(rng.uniform(*cfg.aspect_range))
    ch = int(np.clip(round(np.sqrt(area * h * w / aspect)), 1, h))
    cw = int(np.clip(round(np.sqrt(area * h * w * aspect)), 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return {"area_fraction": area, "aspect": aspect, "top": top, "left": left,
            "height": ch, "width": cw}


def crop_resize_apply(volume, top, left, height, width, out_hw):
    """Bilinear resample of one in-plane window, identical for every slice."""
    s = volume.shape[0]
    oh, ow = out_hw
    # pixel-center alignment: an unscaled full window maps each pixel onto itself
    ys = top + (np.arange(oh) + 0.5) * height / oh - 0.5
    xs = left + (np.arange(ow) + 0.5) * width / ow - 0.5
    zz, yy, xx = np.meshgrid(np.arange(s), ys, xs, indexing="ij")
    out = ndimage.map_coordinates(volume.astype(np.float64), [zz, yy, xx], order=1,
                                  mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_crop_resize(volume, cfg: AugmentConfig, rng, record=None):
    params = sample_crop(volume.shape[1:], cfg, rng)
    if record is not None:
        record["crop"] = params
    return crop_resize_apply(volume, params["top"], params["left"], params["height"],
                             params["width"], cfg.output_shape[1:])


def hflip_apply(volume):
    return np.ascontiguousarray(volume[:, :, ::-1])


def random_hflip(volume, cfg: AugmentConfig, rng, record=None):
    flip = bool(rng.random() < cfg.hflip_prob)
    if record is not None:
        record["hflip"] = flip
    return hflip_apply(volume) if flip else volume.copy()


def jitter_apply(volume, brightness, contrast):
    v = volume.astype(np.float64) * brightness
    m = v.mean()
    return np.clip(contrast * (v - m) + m, 0.0, 1.0).astype(np.float32)


def intensity_jitter(volume, cfg: AugmentConfig, rng, record=None):
    """Grayscale color jitter: brightness then contrast around the volume mean."""
    params = None
    if rng.random() < cfg.jitter_prob:
        params = {"brightness": float(rng.uniform(*cfg.brightness_range)),
                  "contrast": float(rng.uniform(*cfg.contrast_range))}
    if record is not None:
        record["jitter"] = params
    if params is None:
        return volume.copy()
    return jitter_apply(volume, params["brightness"], params["contrast"])


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def blur_apply(volume, kernel_size, sigma):
    if kernel_size > min(volume.shape[1:]):
        raise GeometryError(f"blur kernel {kernel_size} larger than slice {volume.shape[1:]}")
    k = gaussian_kernel(kernel_size, sigma)
    out = ndimage.correlate1d(volume.astype(np.float64), k, axis=1, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=2, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_blur(volume, cfg: AugmentConfig, rng, record=None):
    """Separable in-plane Gaussian blur with reflected borders."""
    sigma = None
    if rng.random() < cfg.blur_prob:
        sigma = float(rng.uniform(*cfg.blur_sigma_range))
    if record is not None:
        record["blur_sigma"] = sigma
    if sigma is None:
        return volume.copy()
    return blur_apply(volume, cfg.blur_kernel, sigma)


def solarize_apply(volume, threshold):
    return np.where(volume >= threshold, 1.0 - volume, volume).astype(np.float32)


def solarize(volume, cfg: AugmentConfig, rng, record=None):
    applied = bool(rng.random() < cfg.solarize_prob)
    if record is not None:
        record["solarize"] = applied
    return solarize_apply(volume, cfg.solarize_threshold) if applied else volume.copy()


def slice_shift_apply(volume, k: int):
    """Translate along the slice axis by ``k``, replicating the edge slice into the gap."""
    s = volume.shape[0]
    idx = np.clip(np.arange(s) - k, 0, s - 1)
    return volume[idx].copy()


def slice_shift(volume, cfg: AugmentConfig, rng, record=None):
    k = int(rng.integers(-cfg.slice_shift_max, cfg.slice_shift_max + 1))
    if record is not None:
        record["slice_shift"] = k
    return slice_shift_apply(volume, k)


PIPELINE = (slice_shift, random_crop_resize, random_hflip, intensity_jitter,
            gaussian_blur, solarize)


def make_view(volume, cfg: AugmentConfig, rng) -> View:
    volume = np.asarray(volume, dtype=np.float32)
    if volume.ndim != 3 or volume.shape[0] != cfg.output_shape[0]:
        raise GeometryError(f"volume shape {volume.shape} incompatible with "
                            f"output_shape {cfg.output_shape}")
    record: dict[str, Any] = {}
    out = volume
    for op in PIPELINE:
        out = op(out, cfg, rng, record)
    return View(out, record)
