"""Synthetic airway-tree volumes with known geometry.

Trees are unions of straight conical tubes (linear radius taper) with
constant wall thickness, rasterized into an isotropic volume. They provide
ground truth for patch extraction, series measurement and the end-to-end
smoke cohort: every segment's diameter profile is known in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .labels import AirwayLabel
from .util import item_rng
from .volume import CenterlineSegment, Volume3D


@dataclass
class TubeSpec:
    segment_id: str
    parent_id: str | None
    generation: int
    start_mm: np.ndarray  # (3,) xyz
    direction: np.ndarray  # (3,) unit
    length_mm: float
    radius_start_mm: float
    taper_per_mm: float = 0.0  # dr/ds, positive narrows distally
    wall_thickness_mm: float = 1.0

    def radius_at(self, s: float) -> float:
        return self.radius_start_mm - self.taper_per_mm * s

    def end_mm(self) -> np.ndarray:
        return self.start_mm + self.direction * self.length_mm

    def validate(self) -> None:
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ConfigError(f"tube {self.segment_id}: direction must be unit length")
        if self.length_mm <= 0 or self.radius_start_mm <= 0 or self.wall_thickness_mm <= 0:
            raise ConfigError(f"tube {self.segment_id}: non-positive geometry")
        if self.radius_at(self.length_mm) <= 0:
            raise ConfigError(f"tube {self.segment_id}: taper closes the lumen")


@dataclass
class PhantomConfig:
    shape_zyx: tuple[int, int, int] = (96, 96, 96)
    spacing_mm: float = 0.5
    lumen_hu: float = -1000.0
    wall_hu: float = 0.0
    parenchyma_hu: float = -800.0
    texture_std_hu: float = 0.0  # optional additive Gaussian texture
    centerline_step_mm: float = 0.8


def rasterize_tree(tubes: list[TubeSpec], config: PhantomConfig | None = None,
                   seed: int = 0) -> Volume3D:
    """Paint walls of every tube, then all lumens, onto parenchyma."""
    config = config or PhantomConfig()
    for tube in tubes:
        tube.validate()
    nz, ny, nx = config.shape_zyx
    s = config.spacing_mm
    zs, ys, xs = np.meshgrid(np.arange(nz) * s, np.arange(ny) * s,
                             np.arange(nx) * s, indexing="ij")
    points = np.stack([xs, ys, zs], axis=-1)  # world xyz per voxel
    data = np.full((nz, ny, nx), config.parenchyma_hu, dtype=np.float32)

    lumen_masks = []
    for tube in tubes:
        rel = points - tube.start_mm
        along = rel @ tube.direction
        radial = np.linalg.norm(rel - along[..., None] * tube.direction, axis=-1)
        in_span = (along >= 0) & (along <= tube.length_mm)
        radius = tube.radius_start_mm - tube.taper_per_mm * along
        wall = in_span & (radial <= radius + tube.wall_thickness_mm)
        lumen = in_span & (radial <= radius)
        data[wall] = config.wall_hu
        lumen_masks.append(lumen)
    for lumen in lumen_masks:
        data[lumen] = config.lumen_hu
    if config.texture_std_hu > 0:
        rng = item_rng(seed, 7)
        data = data + rng.standard_normal(data.shape).astype(np.float32) * config.texture_std_hu
    return Volume3D(data=data, spacing_mm=(s, s, s))


def tube_centerline(tube: TubeSpec, step_mm: float = 0.8) -> CenterlineSegment:
    n = max(2, int(math.ceil(tube.length_mm / step_mm)) + 1)
    ts = np.linspace(0.0, tube.length_mm, n)
    points = tube.start_mm[None, :] + ts[:, None] * tube.direction[None, :]
    tangents = np.tile(tube.direction, (n, 1))
    seg = CenterlineSegment(segment_id=tube.segment_id, parent_id=tube.parent_id,
                            generation=tube.generation, points_mm=points,
                            tangents=tangents)
    seg.validate()
    return seg


def tree_centerlines(tubes: list[TubeSpec],
                     config: PhantomConfig | None = None) -> list[CenterlineSegment]:
    config = config or PhantomConfig()
    return [tube_centerline(t, config.centerline_step_mm) for t in tubes]


def make_tube_phantom(radius_mm: float = 3.0, wall_thickness_mm: float = 1.0,
                      taper_per_mm: float = 0.0, length_mm: float = 30.0,
                      direction=(0.0, 0.0, 1.0),
                      config: PhantomConfig | None = None) -> tuple[Volume3D, CenterlineSegment]:
    """Single straight tube through the volume center, for harness tests."""
    config = config or PhantomConfig()
    nz, ny, nx = config.shape_zyx
    s = config.spacing_mm
    center = np.array([(nx - 1) / 2.0 * s, (ny - 1) / 2.0 * s, (nz - 1) / 2.0 * s])
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    tube = TubeSpec(segment_id="tube", parent_id=None, generation=2,
                    start_mm=center - d * (length_mm / 2.0), direction=d,
                    length_mm=length_mm, radius_start_mm=radius_mm,
                    taper_per_mm=taper_per_mm, wall_thickness_mm=wall_thickness_mm)
    return rasterize_tree([tube], config), tube_centerline(tube, config.centerline_step_mm)


def _rotate_in_plane(direction: np.ndarray, axis_hint: np.ndarray, angle: float) -> np.ndarray:
    """Rotate `direction` by `angle` toward `axis_hint` (Gram-Schmidt plane)."""
    d = direction / np.linalg.norm(direction)
    side = axis_hint - (axis_hint @ d) * d
    side = side / np.linalg.norm(side)
    out = math.cos(angle) * d + math.sin(angle) * side
    return out / np.linalg.norm(out)


@dataclass
class PhantomTree:
    tubes: list[TubeSpec]
    volume: Volume3D
    segments: list[CenterlineSegment]
    severity: float


def make_airway_tree(seed: int, severity: float = 0.0,
                     config: PhantomConfig | None = None,
                     generations: int = 3) -> PhantomTree:
    """Bifurcating tree whose taper and caliber loss grow with `severity`.

    severity in [0, 1]: 0 is a healthy-looking tree, 1 tapers strongly.
    Branching angles and lengths vary a little with the seed.
    """
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity must be in [0, 1], got {severity}")
    config = config or PhantomConfig()
    rng = item_rng(seed, 3)
    nz, ny, nx = config.shape_zyx
    s = config.spacing_mm
    base_taper = 0.004 + 0.035 * severity  # per mm along each segment
    child_ratio = 0.82 - 0.10 * severity  # child start radius / parent end radius

    root_start = np.array([(nx - 1) / 2.0 * s, (ny - 1) / 2.0 * s, 1.5])
    tubes = [TubeSpec(segment_id="seg0", parent_id=None, generation=0,
                      start_mm=root_start, direction=np.array([0.0, 0.0, 1.0]),
                      length_mm=12.0 + rng.uniform(-1, 1),
                      radius_start_mm=3.4 + rng.uniform(-0.2, 0.2),
                      taper_per_mm=base_taper * 0.5,
                      wall_thickness_mm=1.2)]
    frontier = [tubes[0]]
    counter = 1
    hints = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    for gen in range(1, generations + 1):
        next_frontier = []
        hint = hints[(gen - 1) % 2]
        for parent in frontier:
            r_end = parent.radius_at(parent.length_mm)
            for sign in (+1.0, -1.0):
                angle = sign * (0.55 + rng.uniform(-0.08, 0.08))
                direction = _rotate_in_plane(parent.direction, hint, angle)
                length = max(6.0, (11.0 - 1.8 * gen) + rng.uniform(-0.8, 0.8))
                radius = max(0.8, r_end * (child_ratio + rng.uniform(-0.03, 0.03)))
                tube = TubeSpec(segment_id=f"seg{counter}", parent_id=parent.segment_id,
                                generation=gen, start_mm=parent.end_mm(),
                                direction=direction, length_mm=length,
                                radius_start_mm=radius,
                                taper_per_mm=base_taper * (0.8 + 0.4 * rng.uniform()),
                                wall_thickness_mm=max(0.6, 1.1 - 0.15 * gen))
                counter += 1
                tubes.append(tube)
                next_frontier.append(tube)
        frontier = next_frontier
    volume = rasterize_tree(tubes, config, seed=seed)
    return PhantomTree(tubes=tubes, volume=volume,
                       segments=tree_centerlines(tubes, config), severity=severity)


def tube_cross_section_label(tube: TubeSpec, arclength_mm: float) -> AirwayLabel:
    """Analytic circular cross-section at one arclength, for oracles."""
    r = tube.radius_at(arclength_mm)
    return AirwayLabel(R_A=r, R_B=r, W_A=r + tube.wall_thickness_mm,
                       W_B=r + tube.wall_thickness_mm, C_x=0.0, C_y=0.0,
                       theta=0.0, has_adjacent=False)
