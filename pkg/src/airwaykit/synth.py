"""Synthetic airway patch generator.

Samples the seven ellipse-pair parameters from configured distributions and
rasterizes them into 80x80 patches at 0.5 mm spacing. Two appearance models
are provided: a clean piecewise-constant render, and a "pseudo-real" render
with correlated parenchymal texture, a smooth intensity gradient and
occasional abutting vessels, used as a stand-in real domain for desk-scale
domain-shift experiments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bundles import BundleWriter
from .errors import ConfigError, RenderError
from .labels import AirwayLabel, Patch
from .util import derive_int_seed, item_rng


@dataclass
class SynthConfig:
    lumen_radius_range: tuple[float, float] = (0.3, 6.0)
    # wall thickness bounds are linear in the mean lumen radius: a * LR + b
    wall_low: tuple[float, float] = (0.1, 0.2)
    wall_high: tuple[float, float] = (0.3, 0.8)
    center_jitter_std: float = 1.0  # mm, per axis
    adjacent_prob: float = 0.4
    ellipsoidness_range: tuple[float, float] = (0.9, 1.0)
    patch_size_px: int = 80
    pixel_spacing_mm: float = 0.5
    lumen_hu: float = -1000.0
    wall_hu: float = 0.0
    parenchyma_hu: float = -800.0
    supersample: int = 4

    def validate(self) -> None:
        lo, hi = self.lumen_radius_range
        if not (0 < lo <= hi):
            raise ConfigError(f"invalid lumen radius range {self.lumen_radius_range}")
        elo, ehi = self.ellipsoidness_range
        if not (0 < elo <= ehi <= 1.0):
            raise ConfigError(f"invalid ellipsoidness range {self.ellipsoidness_range}")
        for r in self.lumen_radius_range:
            if self.wall_thickness_bounds(r)[0] <= 0:
                raise ConfigError("wall thickness lower bound must stay positive")
        if not 0.0 <= self.adjacent_prob <= 1.0:
            raise ConfigError(f"adjacent probability must be in [0, 1], got {self.adjacent_prob}")
        if self.pixel_spacing_mm <= 0:
            raise ConfigError("pixel spacing must be positive")
        if self.patch_size_px <= 0 or self.patch_size_px % 2 != 0:
            raise ConfigError(f"patch size must be a positive even integer, got {self.patch_size_px}")
        if self.supersample < 1:
            raise ConfigError("supersample factor must be >= 1")

    def wall_thickness_bounds(self, lumen_radius: float) -> tuple[float, float]:
        lo = self.wall_low[0] * lumen_radius + self.wall_low[1]
        hi = self.wall_high[0] * lumen_radius + self.wall_high[1]
        return lo, hi

    @property
    def half_extent_mm(self) -> float:
        return 0.5 * self.patch_size_px * self.pixel_spacing_mm


@dataclass
class PseudoRealConfig:
    """Appearance model of the stand-in real domain."""
    texture_std_hu: float = 60.0
    texture_corr_px: float = 2.0
    gradient_amp_hu: float = 40.0  # max offset at the patch border
    vessel_prob: float = 0.3
    vessel_hu: float = 0.0
    vessel_radius_factor_range: tuple[float, float] = (0.6, 1.4)

    def validate(self) -> None:
        if not 0.0 <= self.vessel_prob <= 1.0:
            raise ConfigError(f"vessel probability must be in [0, 1], got {self.vessel_prob}")
        if self.texture_std_hu < 0 or self.texture_corr_px <= 0:
            raise ConfigError("texture parameters must be positive")


def sample_label(config: SynthConfig, seed: int) -> AirwayLabel:
    """Draw one airway label.

    Mean lumen radius is uniform on the configured interval, wall thickness
    uniform within its radius-dependent bounds, the minor/major ratio uniform
    on the ellipsoidness interval, the centre offset Gaussian per axis, and
    the rotation uniform on [0, pi).
    """
    config.validate()
    rng = item_rng(seed)
    lr = rng.uniform(*config.lumen_radius_range)
    wt = rng.uniform(*config.wall_thickness_bounds(lr))
    ratio = rng.uniform(*config.ellipsoidness_range)
    r_a = 2.0 * lr / (1.0 + ratio)
    r_b = ratio * r_a
    c_x = rng.normal(0.0, config.center_jitter_std)
    c_y = rng.normal(0.0, config.center_jitter_std)
    theta = rng.uniform(0.0, math.pi)
    has_adjacent = bool(rng.uniform() < config.adjacent_prob)
    label = AirwayLabel(R_A=r_a, R_B=r_b, W_A=r_a + wt, W_B=r_b + wt,
                        C_x=c_x, C_y=c_y, theta=theta, has_adjacent=has_adjacent)
    label.validate()
    return label


def _inside_ellipse(x, y, cx, cy, a, b, theta):
    dx = x - cx
    dy = y - cy
    ca, sa = math.cos(theta), math.sin(theta)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def ellipse_boundary_radius(a: float, b: float, theta: float, direction: float) -> float:
    """Distance from the ellipse centre to its boundary along a world-frame direction."""
    u = direction - theta
    return (a * b) / math.hypot(b * math.cos(u), a * math.sin(u))


@dataclass
class _Disc:
    cx: float
    cy: float
    radius: float
    hu: float


def _adjacent_params(label: AirwayLabel, config: SynthConfig, rng) -> tuple[float, float, float]:
    """(lumen radius, wall thickness, placement angle) of the adjacent airway."""
    adj_lr = rng.uniform(0.75, 1.25) * label.lumen_radius
    adj_wt = rng.uniform(*config.wall_thickness_bounds(adj_lr))
    angle = rng.uniform(0.0, 2.0 * math.pi)
    return adj_lr, adj_wt, angle


def _subsample_grid(config: SynthConfig):
    """(x, y) mm coordinates of every subsample point, shape (n, n, ss, ss)."""
    n = config.patch_size_px
    s = config.pixel_spacing_mm
    ss = config.supersample
    base = (np.arange(n) - (n - 1) / 2.0) * s
    off = ((np.arange(ss) + 0.5) / ss - 0.5) * s
    x = base[None, :, None, None] + off[None, None, None, :]  # varies with column
    y = base[:, None, None, None] + off[None, None, :, None]  # varies with row
    return np.broadcast_arrays(x, y)


def _paint(label: AirwayLabel, config: SynthConfig,
           adjacent: tuple[float, float, float] | None,
           under_discs: list[_Disc] | None = None) -> np.ndarray:
    """Rasterize geometry with subpixel supersampling; returns (H, W) HU."""
    x, y = _subsample_grid(config)
    vals = np.full(x.shape, config.parenchyma_hu)

    for disc in under_discs or []:
        m = (x - disc.cx) ** 2 + (y - disc.cy) ** 2 <= disc.radius ** 2
        vals[m] = disc.hu

    if adjacent is not None:
        adj_lr, adj_wt, angle = adjacent
        dist = ellipse_boundary_radius(label.W_A, label.W_B, label.theta, angle) + adj_lr + adj_wt
        ax = label.C_x + dist * math.cos(angle)
        ay = label.C_y + dist * math.sin(angle)
        outer = (x - ax) ** 2 + (y - ay) ** 2 <= (adj_lr + adj_wt) ** 2
        inner = (x - ax) ** 2 + (y - ay) ** 2 <= adj_lr ** 2
        vals[outer] = config.wall_hu
        vals[inner] = config.lumen_hu

    outer = _inside_ellipse(x, y, label.C_x, label.C_y, label.W_A, label.W_B, label.theta)
    inner = _inside_ellipse(x, y, label.C_x, label.C_y, label.R_A, label.R_B, label.theta)
    vals[outer] = config.wall_hu
    vals[inner] = config.lumen_hu

    return vals.mean(axis=(2, 3)).astype(np.float32)


def _check_fits(label: AirwayLabel, config: SynthConfig) -> None:
    half = config.half_extent_mm
    reach = max(abs(label.C_x), abs(label.C_y))
    if reach + label.R_A > half:
        raise RenderError(
            f"inner radius R_A={label.R_A:.3f} mm does not fit in a "
            f"{config.patch_size_px} px patch at {config.pixel_spacing_mm} mm spacing")
    if reach + label.W_A > half:
        raise RenderError(
            f"outer radius W_A={label.W_A:.3f} mm does not fit in a "
            f"{config.patch_size_px} px patch at {config.pixel_spacing_mm} mm spacing")


def render_patch(label: AirwayLabel, config: SynthConfig, seed: int) -> Patch:
    """Noiseless render: lumen / wall / parenchyma intensities, antialiased.

    The adjacent airway, when flagged, is a circular airway of similar lumen
    radius placed tangent to the outer wall at a seed-determined angle.
    """
    label.validate()
    config.validate()
    _check_fits(label, config)
    adjacent = _adjacent_params(label, config, item_rng(seed, 0)) if label.has_adjacent else None
    pixels = _paint(label, config, adjacent)
    return Patch(pixels=pixels, spacing_mm=config.pixel_spacing_mm, label=label)


def render_pseudoreal(label: AirwayLabel, config: SynthConfig,
                      domain: PseudoRealConfig, seed: int) -> Patch:
    """Render the same geometry under the stand-in real appearance model.

    Geometry (including any adjacent airway) is identical to
    :func:`render_patch` for the same (label, seed); appearance adds a smooth
    intensity gradient, correlated parenchymal texture and, with configured
    probability, a soft-tissue vessel disc touching the outer wall.
    """
    label.validate()
    config.validate()
    domain.validate()
    _check_fits(label, config)
    adjacent = _adjacent_params(label, config, item_rng(seed, 0)) if label.has_adjacent else None

    rng = item_rng(seed, 1)
    grad_angle = rng.uniform(0.0, 2.0 * math.pi)
    vessel_draw = rng.uniform()
    vessel_factor = rng.uniform(*domain.vessel_radius_factor_range)
    vessel_angle = rng.uniform(0.0, 2.0 * math.pi)

    discs: list[_Disc] = []
    if vessel_draw < domain.vessel_prob:
        r_vessel = vessel_factor * label.wall_radius
        dist = ellipse_boundary_radius(label.W_A, label.W_B, label.theta, vessel_angle) + r_vessel
        discs.append(_Disc(cx=label.C_x + dist * math.cos(vessel_angle),
                           cy=label.C_y + dist * math.sin(vessel_angle),
                           radius=r_vessel, hu=domain.vessel_hu))

    pixels = _paint(label, config, adjacent, under_discs=discs).astype(np.float64)

    n = config.patch_size_px
    xg, yg = Patch(pixels=np.zeros((n, n), np.float32),
                   spacing_mm=config.pixel_spacing_mm).pixel_coords_mm()
    ramp = (math.cos(grad_angle) * xg + math.sin(grad_angle) * yg) / config.half_extent_mm
    pixels += domain.gradient_amp_hu * ramp

    noise = rng.standard_normal((n, n))
    texture = ndimage.gaussian_filter(noise, sigma=domain.texture_corr_px)
    sd = texture.std()
    if sd > 0:
        pixels += texture * (domain.texture_std_hu / sd)

    return Patch(pixels=pixels.astype(np.float32), spacing_mm=config.pixel_spacing_mm, label=label)


def generate_dataset(n: int, config: SynthConfig, seed: int, out_path,
                     domain: PseudoRealConfig | None = None) -> dict:
    """Write an n-patch dataset bundle; pseudo-real appearance when `domain` is given.

    Per-item seeds are derived from (seed, index), so the bundle is
    reproducible and items are independent of generation order.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    config.validate()
    if domain is not None:
        domain.validate()
    with BundleWriter(out_path, height=config.patch_size_px, width=config.patch_size_px,
                      pixel_spacing_mm=config.pixel_spacing_mm) as writer:
        for i in range(n):
            label = sample_label(config, seed=derive_int_seed(seed, i, 0))
            render_seed = derive_int_seed(seed, i, 1)
            if domain is None:
                patch = render_patch(label, config, seed=render_seed)
            else:
                patch = render_pseudoreal(label, config, domain, seed=render_seed)
            writer.add(patch.pixels, label)
        return writer.close()
