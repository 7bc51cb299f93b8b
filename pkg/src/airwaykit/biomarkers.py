"""Segmental tapering and volume biomarkers, aggregated per patient.

Input is a set of diameter/area series measured along airway segments
(`volume.SegmentSeries`). Per segment this module computes:

* intertapering: fractional diameter drop versus the parent segment,
  (parent mean diameter - mean diameter) / parent mean diameter;
* intratapering: negated slope/intercept ratio of the least-squares line
  diameter = m * arclength + c along the segment;
* volume: sum of lumen areas times the sampling step.

Per-segment values are aggregated to one row per
(patient, biomarker, method, aggregation).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError
from .util import format_float
from .volume import SegmentSeries

BIOMARKER_NAMES = ("intertapering", "intratapering", "volume")
AGGREGATIONS = ("mean", "median")
BIOMARKER_HEADER = ("patient_id", "biomarker", "method", "aggregation", "value",
                    "n_segments")
MIN_BIOMARKER_GENERATION = 2  # trachea and first-generation bronchi excluded


def intertapering(series: SegmentSeries, parent_series: SegmentSeries) -> float:
    d_parent = parent_series.mean_diameter
    if d_parent <= 0:
        raise DataError(
            f"segment {series.segment_id}: parent mean diameter must be positive, "
            f"got {d_parent}")
    return (d_parent - series.mean_diameter) / d_parent


def intratapering(series: SegmentSeries) -> float:
    valid = series.valid
    if int(valid.sum()) < 3:
        raise DataError(
            f"segment {series.segment_id}: intratapering needs >= 3 valid "
            f"positions, got {int(valid.sum())}")
    x = series.arclengths_mm[valid]
    d = series.diameters_mm[valid]
    slope, intercept = np.polyfit(x, d, 1)
    if abs(intercept) < 1e-12:
        raise NumericalError(
            f"segment {series.segment_id}: zero intercept in tapering line fit")
    return float(-slope / intercept)


def segment_volume(series: SegmentSeries) -> float:
    areas = series.areas_mm2[series.valid]
    if areas.size == 0:
        raise DataError(f"segment {series.segment_id}: no valid areas")
    return float(areas.sum() * series.step_mm)


@dataclass
class SegmentBiomarkers:
    segment_id: str
    generation: int
    method: str
    mean_diameter_mm: float
    parent_mean_diameter_mm: float | None
    intertapering: float | None  # None when the parent series is unavailable
    intratapering: float
    volume_mm3: float

    def value(self, biomarker: str) -> float | None:
        if biomarker == "intertapering":
            return self.intertapering
        if biomarker == "intratapering":
            return self.intratapering
        if biomarker == "volume":
            return self.volume_mm3
        raise DataError(f"unknown biomarker {biomarker!r}")


def compute_segment_biomarkers(
        series_by_id: dict[str, SegmentSeries],
        generations: dict[str, int],
        min_generation: int = MIN_BIOMARKER_GENERATION) -> list[SegmentBiomarkers]:
    """Biomarkers for every series of generation >= `min_generation`.

    `series_by_id` should include proximal (excluded) generations too, so
    that first biomarker-eligible segments still find a parent series.
    """
    out = []
    for segment_id in sorted(series_by_id):
        series = series_by_id[segment_id]
        if segment_id not in generations:
            raise DataError(f"segment {segment_id}: generation unknown")
        generation = generations[segment_id]
        if generation < min_generation:
            continue
        parent = series_by_id.get(series.parent_id) if series.parent_id else None
        inter = intertapering(series, parent) if parent is not None else None
        out.append(SegmentBiomarkers(
            segment_id=segment_id, generation=generation, method=series.method,
            mean_diameter_mm=series.mean_diameter,
            parent_mean_diameter_mm=parent.mean_diameter if parent else None,
            intertapering=inter, intratapering=intratapering(series),
            volume_mm3=segment_volume(series)))
    return out


def aggregate_patient(values, mode: str = "mean") -> float:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot aggregate an empty set of segment values")
    if mode == "mean":
        return float(values.mean())
    if mode == "median":
        return float(np.median(values))
    raise DataError(f"unknown aggregation mode {mode!r}")


@dataclass
class BiomarkerRow:
    patient_id: str
    biomarker: str
    method: str
    aggregation: str
    value: float
    n_segments: int


def patient_rows(patient_id: str, segments: list[SegmentBiomarkers],
                 aggregations=AGGREGATIONS) -> list[BiomarkerRow]:
    """One row per (biomarker, method, aggregation) with defined values."""
    if not segments:
        raise DataError(f"patient {patient_id}: no biomarker-eligible segments")
    methods = sorted({s.method for s in segments})
    rows = []
    for method in methods:
        group = [s for s in segments if s.method == method]
        for biomarker in BIOMARKER_NAMES:
            values = [s.value(biomarker) for s in group]
            values = [v for v in values if v is not None]
            if not values:
                continue  # e.g. no segment had a measured parent
            for mode in aggregations:
                rows.append(BiomarkerRow(
                    patient_id=patient_id, biomarker=biomarker, method=method,
                    aggregation=mode, value=aggregate_patient(values, mode),
                    n_segments=len(values)))
    return rows


def write_biomarker_csv(path, rows: list[BiomarkerRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BIOMARKER_HEADER)
        for row in rows:
            writer.writerow([row.patient_id, row.biomarker, row.method,
                             row.aggregation, format_float(row.value),
                             row.n_segments])


def read_biomarker_csv(path) -> list[BiomarkerRow]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"biomarker file not found: {path}")
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != BIOMARKER_HEADER:
            raise DataError(
                f"{path}: bad header {header!r}, expected {list(BIOMARKER_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(BIOMARKER_HEADER):
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(BIOMARKER_HEADER)} fields, got {len(row)}")
            try:
                rows.append(BiomarkerRow(
                    patient_id=row[0], biomarker=row[1], method=row[2],
                    aggregation=row[3], value=float(row[4]),
                    n_segments=int(row[5])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows
