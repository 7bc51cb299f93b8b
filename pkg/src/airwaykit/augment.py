"""On-the-fly standardization and augmentation applied before training.

Order: scale (real domain only) -> blur -> additive HU noise -> per-axis flip
-> standardize -> center crop. Label geometry is transformed alongside the
pixels so augmented patches stay correctly labeled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, StandardizationError
from .labels import AirwayLabel, Patch
from .util import item_rng


@dataclass
class AugmentConfig:
    noise_std_hu: float = 25.0
    blur_sigma_range: tuple[float, float] = (0.5, 0.875)
    flip_prob: float = 0.2
    real_scale_range: tuple[float, float] = (0.75, 1.25)
    crop_size_px: int = 32

    def validate(self) -> None:
        if self.noise_std_hu < 0:
            raise ConfigError("noise std must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip probability must be in [0, 1], got {self.flip_prob}")
        for name, (lo, hi) in (("blur sigma", self.blur_sigma_range),
                               ("real scale", self.real_scale_range)):
            if not (0 < lo <= hi):
                raise ConfigError(f"invalid {name} range ({lo}, {hi})")
        if self.crop_size_px < 1:
            raise ConfigError("crop size must be >= 1")


@dataclass(frozen=True)
class AugmentOps:
    """Sampled augmentation parameters; `scale` is None outside the real domain."""
    scale: float | None
    blur_sigma: float
    flip_x: bool  # reverse columns, negates C_x
    flip_y: bool  # reverse rows, negates C_y


def sample_ops(config: AugmentConfig, is_real: bool, rng: np.random.Generator) -> AugmentOps:
    scale = float(rng.uniform(*config.real_scale_range)) if is_real else None
    sigma = float(rng.uniform(*config.blur_sigma_range))
    flip_x = bool(rng.uniform() < config.flip_prob)
    flip_y = bool(rng.uniform() < config.flip_prob)
    return AugmentOps(scale=scale, blur_sigma=sigma, flip_x=flip_x, flip_y=flip_y)


def standardize_array(pixels: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; constant input is an error."""
    pixels = np.asarray(pixels, dtype=np.float32)
    std = float(pixels.std())
    if std == 0.0 or not math.isfinite(std):
        raise StandardizationError("patch has zero variance, cannot standardize")
    return (pixels - pixels.mean()) / std


def standardize(patch: Patch) -> Patch:
    return Patch(pixels=standardize_array(patch.pixels),
                 spacing_mm=patch.spacing_mm, label=patch.label)


def center_crop(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds patch size {h}x{w}")
    if (h - size) % 2 or (w - size) % 2:
        raise ConfigError("crop must preserve the patch center (same parity)")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return pixels[r0:r0 + size, c0:c0 + size]


def _zoom_about_center(pixels: np.ndarray, scale: float) -> np.ndarray:
    # output(x) = input(x / scale), both in pixel coordinates about the center
    h, w = pixels.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    src_r = (rows - (h - 1) / 2.0) / scale + (h - 1) / 2.0
    src_c = (cols - (w - 1) / 2.0) / scale + (w - 1) / 2.0
    out = ndimage.map_coordinates(pixels.astype(np.float64), [src_r, src_c],
                                  order=1, mode="nearest")
    return out.astype(np.float32)


def transform_label(label: AirwayLabel, ops: AugmentOps) -> AirwayLabel:
    """Mirror the pixel transform in label space (scale and flips only)."""
    out = label
    if ops.scale is not None:
        s = ops.scale
        out = replace(out, R_A=out.R_A * s, R_B=out.R_B * s, W_A=out.W_A * s,
                      W_B=out.W_B * s, C_x=out.C_x * s, C_y=out.C_y * s)
    if ops.flip_x:
        out = replace(out, C_x=-out.C_x, theta=(math.pi - out.theta) % math.pi)
    if ops.flip_y:
        out = replace(out, C_y=-out.C_y, theta=(math.pi - out.theta) % math.pi)
    return out


def apply_ops(patch: Patch, ops: AugmentOps, config: AugmentConfig,
              rng: np.random.Generator) -> Patch:
    """Apply sampled ops; `rng` supplies only the noise field."""
    config.validate()
    pixels = np.asarray(patch.pixels, dtype=np.float32)
    if ops.scale is not None:
        pixels = _zoom_about_center(pixels, ops.scale)
    if ops.blur_sigma > 0:
        pixels = ndimage.gaussian_filter(pixels, sigma=ops.blur_sigma)
    if config.noise_std_hu > 0:
        pixels = pixels + rng.standard_normal(pixels.shape).astype(np.float32) * config.noise_std_hu
    if ops.flip_x:
        pixels = pixels[:, ::-1]
    if ops.flip_y:
        pixels = pixels[::-1, :]
    pixels = standardize_array(pixels)
    pixels = np.ascontiguousarray(center_crop(pixels, config.crop_size_px))
    label = transform_label(patch.label, ops) if patch.label is not None else None
    return Patch(pixels=pixels, spacing_mm=patch.spacing_mm, label=label)


def augment_patch(patch: Patch, config: AugmentConfig, is_real: bool, seed: int) -> Patch:
    """Full pipeline, deterministic per seed; returns a standardized 32x32 patch."""
    rng = item_rng(seed)
    ops = sample_ops(config, is_real, rng)
    return apply_ops(patch, ops, config, rng)
