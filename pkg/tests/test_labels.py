import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airwaykit.errors import DataError
from airwaykit.labels import AirwayLabel, Patch, decode_label, encode_label


def make_label(**overrides):
    base = dict(R_A=3.0, R_B=2.5, W_A=4.0, W_B=3.5, C_x=0.2, C_y=-0.1,
                theta=0.7, has_adjacent=False)
    base.update(overrides)
    return AirwayLabel(**base)


class TestAngleCodec:
    def test_theta_zero_maps_to_cos_one_sin_zero(self):
        v = encode_label(make_label(theta=0.0))
        assert v[6] == pytest.approx(1.0, abs=1e-12)
        assert v[7] == pytest.approx(0.0, abs=1e-12)

    def test_theta_quarter_pi_maps_to_zero_one(self):
        v = encode_label(make_label(theta=math.pi / 4))
        assert v[6] == pytest.approx(0.0, abs=1e-12)
        assert v[7] == pytest.approx(1.0, abs=1e-12)

    def test_theta_pi_encodes_like_zero(self):
        # AirwayLabel restricts theta to [0, pi); encode the raw vector parts
        a = (math.cos(2 * math.pi), math.sin(2 * math.pi))
        b = (math.cos(0.0), math.sin(0.0))
        assert a[0] == pytest.approx(b[0], abs=1e-12)
        assert a[1] == pytest.approx(b[1], abs=1e-12)

    def test_decode_unit_pair_gives_zero(self):
        vec = [3, 2.5, 4, 3.5, 0, 0, 1.0, 0.0]
        assert decode_label(vec).label.theta == 0.0

    def test_decode_non_unit_pair_normalizes(self):
        vec = [3, 2.5, 4, 3.5, 0, 0, 2.0, 0.0]
        assert decode_label(vec).label.theta == 0.0

    def test_round_trip_point_three(self):
        out = decode_label(encode_label(make_label(theta=0.3)))
        assert out.label.theta == pytest.approx(0.3, abs=1e-9)
        assert not out.clamped

    @given(theta=st.floats(min_value=0.0, max_value=math.pi,
                           exclude_max=True, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_any_theta(self, theta):
        out = decode_label(encode_label(make_label(theta=theta)))
        delta = abs(out.label.theta - theta)
        assert min(delta, math.pi - delta) < 1e-9

    def test_zero_angle_pair_rejected(self):
        with pytest.raises(DataError):
            decode_label([3, 2.5, 4, 3.5, 0, 0, 0.0, 0.0])

    def test_negative_radii_clamped_and_flagged(self):
        out = decode_label([-0.5, 2.5, 4, 3.5, 0, 0, 1, 0])
        assert out.clamped
        assert out.label.R_A == 0.0

    def test_full_round_trip_all_fields(self):
        label = make_label()
        out = decode_label(encode_label(label)).label
        for field in ("R_A", "R_B", "W_A", "W_B", "C_x", "C_y", "theta"):
            assert getattr(out, field) == pytest.approx(getattr(label, field),
                                                        abs=1e-9)


class TestLabelValidation:
    def test_valid_label_passes(self):
        make_label().validate()

    def test_outer_must_exceed_inner(self):
        with pytest.raises(DataError):
            make_label(W_A=2.9).validate()

    def test_minor_cannot_exceed_major(self):
        with pytest.raises(DataError):
            make_label(R_B=3.5).validate()

    def test_theta_outside_range_rejected(self):
        with pytest.raises(DataError):
            make_label(theta=math.pi).validate()

    def test_nonfinite_rejected(self):
        with pytest.raises(DataError):
            make_label(C_x=float("nan")).validate()

    def test_mean_radii(self):
        label = make_label()
        assert label.lumen_radius == pytest.approx(2.75)
        assert label.wall_radius == pytest.approx(3.75)


class TestPatch:
    def test_pixel_coords_centered(self):
        patch = Patch(pixels=np.zeros((5, 5), dtype=np.float32), spacing_mm=0.5)
        xs, ys = patch.pixel_coords_mm()
        assert xs[2, 2] == 0.0 and ys[2, 2] == 0.0
        assert xs[0, 0] == -1.0 and ys[0, 0] == -1.0
        assert xs[4, 4] == 1.0 and ys[4, 4] == 1.0

    def test_rejects_non_2d(self):
        with pytest.raises(DataError):
            Patch(pixels=np.zeros((2, 3, 4), dtype=np.float32), spacing_mm=0.5)

    def test_rejects_nonfinite(self):
        bad = np.full((4, 4), np.inf, dtype=np.float32)
        with pytest.raises(DataError):
            Patch(pixels=bad, spacing_mm=0.5)

    def test_rejects_bad_spacing(self):
        with pytest.raises(DataError):
            Patch(pixels=np.zeros((4, 4), dtype=np.float32), spacing_mm=0.0)
