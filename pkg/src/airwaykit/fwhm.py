"""Physics-based baseline measurement: full-width-at-half-maximum wall
localization on ray-cast intensity profiles, plus direct least-squares
ellipse fitting.

Per ray, the wall is the first intensity peak beyond the lumen plateau (the
edge cue), searched within a bounded wall extent (the limit). The inner edge
is the half-max crossing between lumen floor and peak before the peak, the
outer edge the half-max crossing between peak and parenchyma floor after it.
Ellipses are fitted to the valid inner and outer edge points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FitError, MeasurementError
from .labels import AirwayLabel, Patch


class EllipseParams(NamedTuple):
    cx: float
    cy: float
    a: float  # semi-major
    b: float  # semi-minor
    theta: float  # radians in [0, pi)


def fit_ellipse(points) -> EllipseParams:
    """Direct least-squares conic fit constrained to ellipses (Halir-Flusser)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FitError(f"expected (N, 2) points, got shape {pts.shape}")
    if len(pts) < 5:
        raise FitError(f"ellipse fit needs at least 5 points, got {len(pts)}")
    mean = pts.mean(axis=0)
    x = pts[:, 0] - mean[0]
    y = pts[:, 1] - mean[1]
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise FitError("degenerate point configuration (collinear or coincident)") from None
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigval, eigvec = np.linalg.eig(m)
    best = None
    for i in range(3):
        if abs(eigval[i].imag) > 1e-8:
            continue
        v = eigvec[:, i].real
        if 4.0 * v[0] * v[2] - v[1] ** 2 > 0:
            best = v
            break
    if best is None:
        raise FitError("no ellipse satisfies the conic constraint for these points")
    conic = np.concatenate([best, t @ best])
    cx, cy, a, b, theta = _conic_to_geometry(*conic)
    return EllipseParams(cx + mean[0], cy + mean[1], a, b, theta)


def _conic_to_geometry(a_, b_, c_, d_, e_, f_):
    disc = b_ * b_ - 4.0 * a_ * c_
    if not disc < 0:
        raise FitError("fitted conic is not an ellipse")
    cx = (2.0 * c_ * d_ - b_ * e_) / disc
    cy = (2.0 * a_ * e_ - b_ * d_) / disc
    fc = (a_ * cx * cx + b_ * cx * cy + c_ * cy * cy + d_ * cx + e_ * cy + f_)
    w, v = np.linalg.eigh(np.array([[a_, b_ / 2.0], [b_ / 2.0, c_]]))
    ratios = -fc / w
    if not (np.all(np.isfinite(ratios)) and np.all(ratios > 0)):
        raise FitError("fitted conic has no real ellipse axes")
    semi = np.sqrt(ratios)
    i_major = int(np.argmax(semi))
    theta = math.atan2(v[1, i_major], v[0, i_major]) % math.pi
    return float(cx), float(cy), float(semi[i_major]), float(semi[1 - i_major]), theta


@dataclass
class FWHMConfig:
    step_px: float = 0.25
    max_extent_fraction: float = 0.45  # of the patch width
    peak_prominence_hu: float = 50.0
    max_wall_extent_mm: float = 5.0  # search limit beyond the edge cue
    min_valid_fraction: float = 0.5
    profile_smooth_px: float = 0.5  # 1-D Gaussian on each profile; 0 disables
    origin_mode: str = "dark-pixel"  # or "patch-center"
    origin_distance_weight: float = 8.0  # HU per mm^2 pull toward the patch center
    refine_passes: int = 1  # recast rays from the fitted lumen center

    def validate(self) -> None:
        if self.step_px <= 0 or not 0 < self.max_extent_fraction <= 0.5:
            raise ConfigError("invalid ray sampling geometry")
        if self.peak_prominence_hu <= 0 or self.max_wall_extent_mm <= 0:
            raise ConfigError("peak prominence and wall extent must be positive")
        if not 0 < self.min_valid_fraction <= 1:
            raise ConfigError("min_valid_fraction must be in (0, 1]")
        if self.origin_mode not in ("dark-pixel", "patch-center"):
            raise ConfigError(f"unknown origin mode {self.origin_mode!r}")
        if self.origin_distance_weight < 0 or self.refine_passes < 0:
            raise ConfigError("origin weight and refine passes must be >= 0")


@dataclass
class FWHMResult:
    label: AirwayLabel
    valid_ray_fraction: float
    inner_points_mm: np.ndarray  # (N, 2)
    outer_points_mm: np.ndarray


def _seed_origin(patch: Patch, config: FWHMConfig) -> tuple[float, float]:
    """Ray origin in mm: darkest pixel after a center-distance penalty.

    The penalty keeps the seed on the lumen nearest the patch center instead
    of adjacent airways or texture dips farther out; any point inside the
    lumen works because the edge points, not the origin, define the fit.
    """
    if config.origin_mode == "patch-center":
        return 0.0, 0.0
    pixels = ndimage.uniform_filter(patch.pixels.astype(np.float64), size=3)
    xs, ys = patch.pixel_coords_mm()
    score = pixels + config.origin_distance_weight * (xs ** 2 + ys ** 2)
    r, c = np.unravel_index(np.argmin(score), score.shape)
    return float(xs[r, c]), float(ys[r, c])


def _ray_edges(profile: np.ndarray, step_mm: float, config: FWHMConfig):
    """(t_inner_mm, t_outer_mm) along one profile, or None if no valid wall."""
    n_near = max(2, int(round(1.0 / step_mm)))
    floor0 = profile[:n_near].min()
    above = np.nonzero(profile >= floor0 + config.peak_prominence_hu)[0]
    if len(above) == 0:
        return None
    i_cue = int(above[0])
    lumen_floor = profile[:i_cue + 1].min()
    wall_samples = max(2, int(round(config.max_wall_extent_mm / step_mm)))
    wall_end = min(len(profile), i_cue + wall_samples)
    i_peak = i_cue + int(np.argmax(profile[i_cue:wall_end]))
    peak = profile[i_peak]
    if peak < lumen_floor + config.peak_prominence_hu:
        return None

    half_in = 0.5 * (lumen_floor + peak)
    j = i_peak
    while j > 0 and profile[j] > half_in:
        j -= 1
    if profile[j] > half_in:
        return None
    t_inner = _cross(profile, j, half_in) * step_mm

    par_end = min(len(profile), i_peak + wall_samples)
    par_floor = profile[i_peak:par_end].min()
    half_out = 0.5 * (par_floor + peak)
    seg = profile[i_peak:par_end]
    below = np.nonzero(seg <= half_out)[0]
    if len(below) == 0 or below[0] == 0:
        return None
    k = i_peak + int(below[0]) - 1
    t_outer = _cross(profile, k, half_out) * step_mm
    return t_inner, t_outer


def _cross(profile: np.ndarray, i: int, level: float) -> float:
    """Subsample index where the profile crosses `level` between i and i+1."""
    a, b = profile[i], profile[i + 1]
    if b == a:
        return float(i)
    frac = (level - a) / (b - a)
    return i + float(np.clip(frac, 0.0, 1.0))


def measure_fwhm(patch: Patch, n_rays: int = 64,
                 config: FWHMConfig | None = None) -> FWHMResult:
    """Half-max wall localization on `n_rays` profiles, then ellipse fits.

    The returned label takes center and rotation from the inner (lumen) fit.
    Configured refine passes recast the rays from the fitted lumen center,
    which symmetrizes ray angles when the seed origin was off-center.
    """
    config = config or FWHMConfig()
    config.validate()
    if n_rays < 8:
        raise ConfigError(f"need at least 8 rays, got {n_rays}")
    origin = _seed_origin(patch, config)
    result = _measure_once(patch, origin, n_rays, config)
    for _ in range(config.refine_passes):
        try:
            result = _measure_once(patch, (result.label.C_x, result.label.C_y),
                                   n_rays, config)
        except (MeasurementError, FitError):
            break
    return result


def _measure_once(patch: Patch, origin: tuple[float, float], n_rays: int,
                  config: FWHMConfig) -> FWHMResult:
    h, w = patch.pixels.shape
    ox, oy = origin
    step_mm = config.step_px * patch.spacing_mm
    max_t_mm = config.max_extent_fraction * w * patch.spacing_mm
    n_t = int(max_t_mm / step_mm)
    t_mm = np.arange(n_t) * step_mm
    angles = np.arange(n_rays) * (2.0 * math.pi / n_rays)

    # pixel coordinates of every (ray, sample) pair, bilinear in one call
    dirs_x = np.cos(angles)[:, None]
    dirs_y = np.sin(angles)[:, None]
    xs = ox + t_mm[None, :] * dirs_x
    ys = oy + t_mm[None, :] * dirs_y
    cols = xs / patch.spacing_mm + (w - 1) / 2.0
    rows = ys / patch.spacing_mm + (h - 1) / 2.0
    profiles = ndimage.map_coordinates(patch.pixels.astype(np.float64),
                                       [rows, cols], order=1, mode="nearest")
    if config.profile_smooth_px > 0:
        profiles = ndimage.gaussian_filter1d(
            profiles, sigma=config.profile_smooth_px / config.step_px,
            axis=1, mode="nearest")

    inner_pts = []
    outer_pts = []
    n_valid = 0
    for i in range(n_rays):
        edges = _ray_edges(profiles[i], step_mm, config)
        if edges is None:
            continue
        n_valid += 1
        t_in, t_out = edges
        inner_pts.append((ox + t_in * dirs_x[i, 0], oy + t_in * dirs_y[i, 0]))
        outer_pts.append((ox + t_out * dirs_x[i, 0], oy + t_out * dirs_y[i, 0]))

    fraction = n_valid / n_rays
    if fraction < config.min_valid_fraction:
        raise MeasurementError(
            f"only {n_valid}/{n_rays} rays located a wall "
            f"(need {config.min_valid_fraction:.0%})")
    inner = fit_ellipse(inner_pts)
    outer = fit_ellipse(outer_pts)
    label = AirwayLabel(R_A=inner.a, R_B=inner.b, W_A=outer.a, W_B=outer.b,
                        C_x=inner.cx, C_y=inner.cy, theta=inner.theta,
                        has_adjacent=False)
    return FWHMResult(label=label, valid_ray_fraction=fraction,
                      inner_points_mm=np.array(inner_pts),
                      outer_points_mm=np.array(outer_pts))
