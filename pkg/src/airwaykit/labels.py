"""Airway cross-section labels, the patch container, and the angle codec.

A label is a pair of concentric, co-rotated ellipses: the inner one traces
the lumen boundary, the outer one the outer wall boundary. All lengths are
in millimetres, the rotation in radians on [0, pi). For regression the
pi-periodic rotation is encoded as (cos 2*theta, sin 2*theta) so the target
is continuous across the wrap-around.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError

LABEL_FIELDS = ("R_A", "R_B", "W_A", "W_B", "C_x", "C_y", "theta")


@dataclass
class AirwayLabel:
    R_A: float  # lumen major radius, mm
    R_B: float  # lumen minor radius, mm
    W_A: float  # outer-wall major radius, mm
    W_B: float  # outer-wall minor radius, mm
    C_x: float  # centre offset from patch centre, mm
    C_y: float
    theta: float  # rotation, radians in [0, pi)
    has_adjacent: bool = False

    @property
    def lumen_radius(self) -> float:
        """Mean inner radius (R_A + R_B) / 2."""
        return 0.5 * (self.R_A + self.R_B)

    @property
    def wall_radius(self) -> float:
        return 0.5 * (self.W_A + self.W_B)

    def validate(self) -> None:
        if not all(math.isfinite(v) for v in (self.R_A, self.R_B, self.W_A, self.W_B,
                                              self.C_x, self.C_y, self.theta)):
            raise DataError("label contains non-finite values")
        if not (self.R_A > 0 and self.R_B > 0):
            raise DataError(f"lumen radii must be positive, got R_A={self.R_A}, R_B={self.R_B}")
        if not (self.W_A > self.R_A and self.W_B > self.R_B):
            raise DataError("outer radii must exceed inner radii on both axes")
        if self.R_B > self.R_A + 1e-12 or self.W_B > self.W_A + 1e-12:
            raise DataError("minor radius exceeds major radius")
        if not (0.0 <= self.theta < math.pi):
            raise DataError(f"theta must lie in [0, pi), got {self.theta}")


@dataclass
class Patch:
    """Single-channel image in Hounsfield-like units with physical spacing.

    Pixel (row, col) is centred at x = (col - (W-1)/2) * spacing,
    y = (row - (H-1)/2) * spacing, in mm relative to the patch centre.
    """
    pixels: np.ndarray  # (H, W) float32
    spacing_mm: float
    label: AirwayLabel | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise DataError(f"patch pixels must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError("patch contains non-finite values")
        if not self.spacing_mm > 0:
            raise DataError(f"pixel spacing must be positive, got {self.spacing_mm}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def pixel_coords_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) mm coordinates of every pixel centre, each (H, W)."""
        h, w = self.pixels.shape
        x = (np.arange(w) - (w - 1) / 2.0) * self.spacing_mm
        y = (np.arange(h) - (h - 1) / 2.0) * self.spacing_mm
        return np.meshgrid(x, y)


class DecodedLabel(NamedTuple):
    label: AirwayLabel
    clamped: bool


def encode_label(label: AirwayLabel) -> np.ndarray:
    """8-vector (R_A, R_B, W_A, W_B, C_x, C_y, cos 2*theta, sin 2*theta)."""
    return np.array(
        [label.R_A, label.R_B, label.W_A, label.W_B, label.C_x, label.C_y,
         math.cos(2.0 * label.theta), math.sin(2.0 * label.theta)],
        dtype=np.float64,
    )


def decode_label(vec) -> DecodedLabel:
    """Inverse of :func:`encode_label`.

    theta is recovered as atan2(s, c) / 2 mapped into [0, pi). Negative radii
    are clamped to zero and flagged; a (0, 0) angle pair has no defined
    orientation and raises.
    """
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    if v.shape[0] != 8:
        raise DataError(f"expected an 8-vector, got length {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise DataError("label vector contains non-finite values")
    c, s = float(v[6]), float(v[7])
    if c == 0.0 and s == 0.0:
        raise DataError("angle pair (0, 0) has undefined orientation")
    theta = 0.5 * math.atan2(s, c)
    if theta < 0.0:
        theta += math.pi
    if theta >= math.pi:  # guard the exact boundary
        theta -= math.pi
    radii = v[:4].copy()
    clamped = bool(np.any(radii < 0.0))
    radii = np.maximum(radii, 0.0)
    label = AirwayLabel(
        R_A=float(radii[0]), R_B=float(radii[1]),
        W_A=float(radii[2]), W_B=float(radii[3]),
        C_x=float(v[4]), C_y=float(v[5]),
        theta=theta, has_adjacent=False,
    )
    return DecodedLabel(label, clamped)
