"""Orthogonal patch extraction along airway centerlines and per-segment
measurement series.

World coordinates are (x, y, z) in mm. Volume voxels are stored depth-major
as data[iz, iy, ix]; the bundle on disk is the dataset format with an extra
`depth` manifest key and isotropic spacing. Centerlines arrive as CSV rows
ordered proximal to distal along each segment.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bundles import BundleWriter, DatasetBundle, open_bundle
from .errors import ConfigError, DataError
from .labels import AirwayLabel, Patch
from .util import format_float

CENTERLINE_HEADER = ("segment_id", "parent_id", "generation",
                     "x_mm", "y_mm", "z_mm", "tx", "ty", "tz")
SERIES_HEADER = ("segment_id", "parent_id", "arclength_mm",
                 "diameter_mm", "area_mm2", "method")

AIR_HU = -1000.0


@dataclass
class Volume3D:
    """data[iz, iy, ix] with voxel centers at origin + index * spacing."""
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (0.5, 0.5, 0.5)  # (sx, sy, sz)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.data.shape}")
        if not all(s > 0 for s in self.spacing_mm):
            raise DataError(f"voxel spacings must be positive, got {self.spacing_mm}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("volume contains non-finite values")

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        return self.data.shape

    def world_to_index(self, points_xyz: np.ndarray) -> np.ndarray:
        """(N, 3) world mm -> (N, 3) fractional (ix, iy, iz) voxel indices."""
        p = np.atleast_2d(np.asarray(points_xyz, dtype=np.float64))
        return (p - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)

    def contains(self, point_xyz) -> bool:
        ix, iy, iz = self.world_to_index(point_xyz)[0]
        nz, ny, nx = self.data.shape
        return (0 <= ix <= nx - 1) and (0 <= iy <= ny - 1) and (0 <= iz <= nz - 1)


def save_volume_bundle(volume: Volume3D, out_dir) -> dict:
    sx, sy, sz = volume.spacing_mm
    if not (math.isclose(sx, sy) and math.isclose(sy, sz)):
        raise DataError("volume bundles require isotropic spacing")
    nz, ny, nx = volume.data.shape
    with BundleWriter(out_dir, height=ny, width=nx, depth=nz,
                      pixel_spacing_mm=sx) as writer:
        writer.add(volume.data)
        return writer.close()


def load_volume_bundle(path) -> Volume3D:
    bundle = open_bundle(path)
    if bundle.patches.ndim != 4:
        raise DataError(f"{path}: bundle has no depth key, not a volume bundle")
    if bundle.patches.shape[0] != 1:
        raise DataError(f"{path}: expected a single-volume bundle, "
                        f"found {bundle.patches.shape[0]} items")
    s = bundle.pixel_spacing_mm
    return Volume3D(data=np.array(bundle.patches[0]), spacing_mm=(s, s, s))


@dataclass
class CenterlineSegment:
    segment_id: str
    parent_id: str | None
    generation: int
    points_mm: np.ndarray  # (N, 3) xyz, proximal first
    tangents: np.ndarray  # (N, 3) unit vectors

    def validate(self) -> None:
        if self.points_mm.shape != self.tangents.shape or self.points_mm.ndim != 2 \
                or self.points_mm.shape[1] != 3 or len(self.points_mm) < 2:
            raise DataError(f"segment {self.segment_id}: need matching (N>=2, 3) "
                            "points and tangents")
        norms = np.linalg.norm(self.tangents, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DataError(f"segment {self.segment_id}: tangents must be unit length")
        steps = np.linalg.norm(np.diff(self.points_mm, axis=0), axis=1)
        if np.any(steps > 1.0 + 1e-9):
            raise DataError(f"segment {self.segment_id}: consecutive points more "
                            "than 1 mm apart")
        if np.any(steps <= 0):
            raise DataError(f"segment {self.segment_id}: repeated points")

    @property
    def arclengths(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.points_mm, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def length_mm(self) -> float:
        return float(self.arclengths[-1])

    def at_arclength(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """(point, unit tangent) linearly interpolated at arclength s."""
        cum = self.arclengths
        if not 0.0 <= s <= cum[-1] + 1e-9:
            raise DataError(f"arclength {s} outside segment of length {cum[-1]:.3f}")
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(cum) - 2)
        f = (s - cum[i]) / (cum[i + 1] - cum[i])
        point = (1 - f) * self.points_mm[i] + f * self.points_mm[i + 1]
        tangent = (1 - f) * self.tangents[i] + f * self.tangents[i + 1]
        norm = np.linalg.norm(tangent)
        if norm < 1e-9:
            raise DataError(f"segment {self.segment_id}: interpolated tangent vanishes")
        return point, tangent / norm


def read_centerline_csv(path) -> list[CenterlineSegment]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"centerline file not found: {path}")
    rows_by_segment: dict[str, list] = {}
    meta: dict[str, tuple[str | None, int]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CENTERLINE_HEADER:
            raise DataError(f"{path}: bad header {header!r}, expected {list(CENTERLINE_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(CENTERLINE_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(CENTERLINE_HEADER)} fields")
            seg_id, parent_id = row[0], row[1] or None
            try:
                gen = int(row[2])
                values = [float(v) for v in row[3:9]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if seg_id in meta and meta[seg_id] != (parent_id, gen):
                raise DataError(f"{path}:{lineno}: segment {seg_id} changes parent/generation")
            meta[seg_id] = (parent_id, gen)
            rows_by_segment.setdefault(seg_id, []).append(values)
    segments = []
    for seg_id, rows in rows_by_segment.items():
        arr = np.array(rows, dtype=np.float64)
        parent_id, gen = meta[seg_id]
        seg = CenterlineSegment(segment_id=seg_id, parent_id=parent_id, generation=gen,
                                points_mm=arr[:, :3], tangents=arr[:, 3:])
        seg.validate()
        segments.append(seg)
    return segments


def write_centerline_csv(path, segments) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CENTERLINE_HEADER)
        for seg in segments:
            for p, t in zip(seg.points_mm, seg.tangents):
                writer.writerow([seg.segment_id, seg.parent_id or "", seg.generation]
                                + [format_float(v) for v in (*p, *t)])


def plane_basis(tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic in-plane (u, v): cross with the most-orthogonal axis.

    Ties between axes break in x, y, z order.
    """
    t = np.asarray(tangent, dtype=np.float64)
    norm = np.linalg.norm(t)
    if abs(norm - 1.0) > 1e-6:
        raise DataError(f"tangent must be unit length, |t| = {norm:.6f}")
    t = t / norm
    dots = np.abs(t)
    axis = np.zeros(3)
    axis[int(np.argmin(dots))] = 1.0
    u = np.cross(t, axis)
    u = u / np.linalg.norm(u)
    v = np.cross(t, u)
    v = v / np.linalg.norm(v)
    return u, v


def extract_patch(volume: Volume3D, point_xyz, tangent, size_px: int = 80,
                  spacing_mm: float = 0.5, fill_hu: float = AIR_HU,
                  basis: tuple[np.ndarray, np.ndarray] | None = None) -> Patch:
    """Trilinear 2-D resample of the plane orthogonal to `tangent` at `point`.

    Out-of-volume samples take `fill_hu`. `basis` overrides the deterministic
    in-plane axes (u for patch x, v for patch y); both must be unit vectors
    orthogonal to the tangent.
    """
    point = np.asarray(point_xyz, dtype=np.float64)
    if not volume.contains(point):
        raise DataError(f"extraction point {tuple(point)} lies outside the volume")
    u, v = basis if basis is not None else plane_basis(tangent)
    offsets = (np.arange(size_px) - (size_px - 1) / 2.0) * spacing_mm
    # world position of every pixel center: point + x*u + y*v
    world = (point[None, None, :]
             + offsets[None, :, None] * u[None, None, :]
             + offsets[:, None, None] * v[None, None, :])
    idx = volume.world_to_index(world.reshape(-1, 3))
    coords = [idx[:, 2], idx[:, 1], idx[:, 0]]  # (iz, iy, ix) for data[z, y, x]
    samples = ndimage.map_coordinates(volume.data.astype(np.float64), coords,
                                      order=1, mode="constant", cval=fill_hu)
    return Patch(pixels=samples.reshape(size_px, size_px).astype(np.float32),
                 spacing_mm=spacing_mm)


class SegmentExcludedError(DataError):
    def __init__(self, segment_id: str, reason: str):
        super().__init__(f"segment {segment_id} excluded: {reason}")
        self.segment_id = segment_id
        self.reason = reason


@dataclass
class SeriesConfig:
    patch_size_px: int = 80
    patch_spacing_mm: float = 0.5
    prune_mm: float = 1.0  # dropped at each segment end
    step_mm: float = 0.5
    min_length_mm: float = 2.0  # raw length must exceed this
    max_missing_fraction: float = 0.3
    diameter_mode: str = "equivalent-area"  # or "mean-axes"

    def validate(self) -> None:
        if self.patch_size_px < 8 or self.patch_spacing_mm <= 0:
            raise ConfigError("invalid patch geometry")
        if self.prune_mm < 0 or self.step_mm <= 0 or self.min_length_mm <= 0:
            raise ConfigError("invalid series sampling parameters")
        if not 0 <= self.max_missing_fraction < 1:
            raise ConfigError("max_missing_fraction must be in [0, 1)")
        if self.diameter_mode not in ("equivalent-area", "mean-axes"):
            raise ConfigError(f"unknown diameter mode {self.diameter_mode!r}")


def label_diameter(label: AirwayLabel, mode: str = "equivalent-area") -> float:
    if mode == "equivalent-area":
        return 2.0 * math.sqrt(label.R_A * label.R_B)
    if mode == "mean-axes":
        return label.R_A + label.R_B
    raise ConfigError(f"unknown diameter mode {mode!r}")


@dataclass
class SegmentSeries:
    """Measurements on a constant-step arclength grid; NaN marks failures."""
    segment_id: str
    parent_id: str | None
    arclengths_mm: np.ndarray  # from the raw proximal end, constant step
    diameters_mm: np.ndarray
    areas_mm2: np.ndarray
    method: str
    step_mm: float = 0.5

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.diameters_mm)

    @property
    def mean_diameter(self) -> float:
        d = self.diameters_mm[self.valid]
        if len(d) == 0:
            raise DataError(f"segment {self.segment_id}: no valid measurements")
        return float(d.mean())


def series_positions(segment: CenterlineSegment,
                     config: SeriesConfig) -> np.ndarray:
    """Constant-step arclength grid over the pruned segment.

    Raises SegmentExcludedError when the raw segment is not longer than
    `min_length_mm`.
    """
    length = segment.length_mm
    if length <= config.min_length_mm:
        raise SegmentExcludedError(segment.segment_id, "too short after pruning")
    start = config.prune_mm
    end = length - config.prune_mm
    n_pos = int(math.floor((end - start) / config.step_mm + 1e-9)) + 1
    if n_pos < 1:
        raise SegmentExcludedError(segment.segment_id, "too short after pruning")
    return start + config.step_mm * np.arange(n_pos)


def build_segment_series(volume: Volume3D, segment: CenterlineSegment,
                         measure_fn, method: str,
                         config: SeriesConfig | None = None) -> SegmentSeries:
    """Measure patches every `step_mm` along the pruned segment.

    `measure_fn(patch) -> AirwayLabel`; a raised DataError or NumericalError
    marks that position missing. Too-short segments and series with more than
    the allowed missing fraction raise SegmentExcludedError.
    """
    from .errors import NumericalError

    config = config or SeriesConfig()
    config.validate()
    segment.validate()
    arclengths = series_positions(segment, config)
    n_pos = arclengths.size
    diameters = np.full(n_pos, np.nan)
    areas = np.full(n_pos, np.nan)
    for i, s in enumerate(arclengths):
        point, tangent = segment.at_arclength(float(s))
        try:
            patch = extract_patch(volume, point, tangent, size_px=config.patch_size_px,
                                  spacing_mm=config.patch_spacing_mm)
            label = measure_fn(patch)
            d = label_diameter(label, config.diameter_mode)
            if not (d > 0 and math.isfinite(d)):
                continue
            diameters[i] = d
            areas[i] = math.pi * label.R_A * label.R_B
        except (DataError, NumericalError):
            continue
    missing = float(np.mean(~np.isfinite(diameters)))
    if missing > config.max_missing_fraction:
        raise SegmentExcludedError(
            segment.segment_id,
            f"{missing:.0%} of positions failed measurement "
            f"(limit {config.max_missing_fraction:.0%})")
    return SegmentSeries(segment_id=segment.segment_id, parent_id=segment.parent_id,
                         arclengths_mm=arclengths, diameters_mm=diameters,
                         areas_mm2=areas, method=method, step_mm=config.step_mm)


def biomarker_segments(segments: list[CenterlineSegment]) -> list[CenterlineSegment]:
    """Drop the trachea and first-generation bronchi (generation <= 1)."""
    return [s for s in segments if s.generation > 1]


def write_series_csv(path, series_list: list[SegmentSeries]) -> None:
    """One row per valid position."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_HEADER)
        for series in series_list:
            for i in np.nonzero(series.valid)[0]:
                writer.writerow([series.segment_id, series.parent_id or "",
                                 format_float(series.arclengths_mm[i]),
                                 format_float(series.diameters_mm[i]),
                                 format_float(series.areas_mm2[i]),
                                 series.method])


POSITIONS_HEADER = ("id", "segment_id", "parent_id", "generation",
                    "arclength_mm")


@dataclass
class PatchPosition:
    """Provenance of one extracted patch within a segment series."""
    id: str
    segment_id: str
    parent_id: str | None
    generation: int
    arclength_mm: float


def extract_series_patches(volume: Volume3D, segment: CenterlineSegment,
                           config: SeriesConfig | None = None):
    """All series patches of one segment: (positions, patches), paired."""
    config = config or SeriesConfig()
    config.validate()
    segment.validate()
    positions, patches = [], []
    for s in series_positions(segment, config):
        point, tangent = segment.at_arclength(float(s))
        patches.append(extract_patch(volume, point, tangent,
                                     size_px=config.patch_size_px,
                                     spacing_mm=config.patch_spacing_mm))
        positions.append(PatchPosition(
            id=f"{segment.segment_id}@{format_float(float(s))}",
            segment_id=segment.segment_id, parent_id=segment.parent_id,
            generation=segment.generation, arclength_mm=float(s)))
    return positions, patches


def write_positions_csv(path, positions: list[PatchPosition]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSITIONS_HEADER)
        for p in positions:
            writer.writerow([p.id, p.segment_id, p.parent_id or "",
                             p.generation, format_float(p.arclength_mm)])


def read_positions_csv(path) -> list[PatchPosition]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"positions file not found: {path}")
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != POSITIONS_HEADER:
            raise DataError(
                f"{path}: bad header {header!r}, expected {list(POSITIONS_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(POSITIONS_HEADER):
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(POSITIONS_HEADER)} fields")
            try:
                out.append(PatchPosition(id=row[0], segment_id=row[1],
                                         parent_id=row[2] or None,
                                         generation=int(row[3]),
                                         arclength_mm=float(row[4])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def assemble_series(positions: list[PatchPosition], labels_by_id: dict,
                    method: str, config: SeriesConfig | None = None):
    """Join measured labels onto extracted positions.

    `labels_by_id` maps position id -> AirwayLabel or None (failed
    measurement). Returns (series list, exclusions) where exclusions are
    SegmentExcludedError instances for over-missing segments.
    """
    config = config or SeriesConfig()
    config.validate()
    by_segment: dict[str, list[PatchPosition]] = {}
    parents: dict[str, str | None] = {}
    for p in positions:
        by_segment.setdefault(p.segment_id, []).append(p)
        parents[p.segment_id] = p.parent_id
    series_list, exclusions = [], []
    for segment_id in sorted(by_segment):
        rows = sorted(by_segment[segment_id], key=lambda p: p.arclength_mm)
        arclengths = np.array([p.arclength_mm for p in rows])
        diameters = np.full(len(rows), np.nan)
        areas = np.full(len(rows), np.nan)
        for i, p in enumerate(rows):
            label = labels_by_id.get(p.id)
            if label is None:
                continue
            d = label_diameter(label, config.diameter_mode)
            if not (d > 0 and math.isfinite(d)):
                continue
            diameters[i] = d
            areas[i] = math.pi * label.R_A * label.R_B
        missing = float(np.mean(~np.isfinite(diameters)))
        if missing > config.max_missing_fraction:
            exclusions.append(SegmentExcludedError(
                segment_id,
                f"{missing:.0%} of positions failed measurement "
                f"(limit {config.max_missing_fraction:.0%})"))
            continue
        series_list.append(SegmentSeries(
            segment_id=segment_id, parent_id=parents[segment_id],
            arclengths_mm=arclengths, diameters_mm=diameters, areas_mm2=areas,
            method=method, step_mm=config.step_mm))
    return series_list, exclusions


def read_series_csv(path) -> list[SegmentSeries]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"series file not found: {path}")
    grouped: dict[tuple[str, str], list] = {}
    parents: dict[str, str | None] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SERIES_HEADER:
            raise DataError(f"{path}: bad header {header!r}, expected {list(SERIES_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(SERIES_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(SERIES_HEADER)} fields")
            try:
                s, d, a = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            parents[row[0]] = row[1] or None
            grouped.setdefault((row[0], row[5]), []).append((s, d, a))
    out = []
    for (seg_id, method), rows in grouped.items():
        rows.sort()
        arr = np.array(rows, dtype=np.float64)
        steps = np.diff(arr[:, 0])
        step = float(steps.min()) if len(steps) else 0.5
        out.append(SegmentSeries(segment_id=seg_id, parent_id=parents[seg_id],
                                 arclengths_mm=arr[:, 0], diameters_mm=arr[:, 1],
                                 areas_mm2=arr[:, 2], method=method, step_mm=step))
    return out
