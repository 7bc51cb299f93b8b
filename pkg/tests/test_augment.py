import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airwaykit.augment import (AugmentConfig, AugmentOps, apply_ops,
                               augment_patch, center_crop, sample_ops,
                               standardize_array, transform_label)
from airwaykit.errors import ConfigError, StandardizationError
from airwaykit.labels import AirwayLabel, Patch
from airwaykit.synth import render_patch, sample_label
from airwaykit.util import item_rng

NO_OPS = AugmentOps(scale=None, blur_sigma=0.0, flip_x=False, flip_y=False)


class TestStandardize:
    def test_zero_mean_unit_std(self, clean_patch):
        out = standardize_array(clean_patch.pixels)
        assert abs(float(out.mean())) < 1e-6
        assert abs(float(out.std()) - 1.0) < 1e-6

    @given(a=st.floats(min_value=0.1, max_value=50, allow_nan=False),
           b=st.floats(min_value=-500, max_value=500, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, a, b):
        rng = item_rng(999)
        x = rng.normal(size=(16, 16)).astype(np.float32) * 100
        base = standardize_array(x)
        scaled = standardize_array(a * x + b)
        assert np.allclose(base, scaled, atol=1e-3)

    def test_constant_input_rejected(self):
        with pytest.raises(StandardizationError):
            standardize_array(np.zeros((8, 8), dtype=np.float32))


class TestCenterCrop:
    def test_crop_extracts_center(self):
        x = np.arange(36, dtype=np.float32).reshape(6, 6)
        out = center_crop(x, 2)
        assert np.array_equal(out, x[2:4, 2:4])

    def test_crop_larger_than_input_rejected(self):
        with pytest.raises(ConfigError):
            center_crop(np.zeros((4, 4), dtype=np.float32), 8)


class TestLabelTransform:
    def test_horizontal_flip_negates_cx_and_reflects_theta(self):
        label = AirwayLabel(R_A=3, R_B=2, W_A=4, W_B=3, C_x=1.2, C_y=0.4,
                            theta=0.7)
        ops = AugmentOps(scale=None, blur_sigma=0, flip_x=True, flip_y=False)
        out = transform_label(label, ops)
        assert out.C_x == pytest.approx(-1.2)
        assert out.C_y == pytest.approx(0.4)
        assert out.theta == pytest.approx((math.pi - 0.7) % math.pi)

    def test_vertical_flip_negates_cy(self):
        label = AirwayLabel(R_A=3, R_B=2, W_A=4, W_B=3, C_x=1.2, C_y=0.4,
                            theta=0.7)
        ops = AugmentOps(scale=None, blur_sigma=0, flip_x=False, flip_y=True)
        out = transform_label(label, ops)
        assert out.C_y == pytest.approx(-0.4)

    def test_scale_multiplies_radii_and_center(self):
        label = AirwayLabel(R_A=3, R_B=2, W_A=4, W_B=3, C_x=1.0, C_y=-0.5,
                            theta=0.7)
        ops = AugmentOps(scale=1.5, blur_sigma=0, flip_x=False, flip_y=False)
        out = transform_label(label, ops)
        assert out.R_A == pytest.approx(4.5)
        assert out.W_B == pytest.approx(4.5)
        assert out.C_x == pytest.approx(1.5)
        assert out.theta == pytest.approx(0.7)

    def test_flip_commutes_with_render(self, default_config):
        # render(flip(label)) == flip(render(label)) exactly for noiseless patches
        config = default_config.synth
        label = AirwayLabel(R_A=3.0, R_B=2.6, W_A=4.0, W_B=3.6,
                            C_x=0.8, C_y=-0.6, theta=0.9)
        ops = AugmentOps(scale=None, blur_sigma=0, flip_x=True, flip_y=False)
        flipped_label = transform_label(label, ops)
        direct = render_patch(flipped_label, config, seed=0).pixels
        mirrored = render_patch(label, config, seed=0).pixels[:, ::-1]
        assert float(np.max(np.abs(direct - mirrored))) < 1e-4


class TestAugmentPatch:
    def test_output_is_crop_sized_and_finite(self, clean_patch, default_config):
        out = augment_patch(clean_patch, default_config.augment,
                            is_real=False, seed=3)
        assert out.shape == (32, 32)
        assert np.all(np.isfinite(out.pixels))

    def test_deterministic_per_seed(self, clean_patch, default_config):
        a = augment_patch(clean_patch, default_config.augment, is_real=True, seed=5)
        b = augment_patch(clean_patch, default_config.augment, is_real=True, seed=5)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.label == b.label

    def test_synthetic_domain_never_scales(self, default_config):
        for s in range(50):
            ops = sample_ops(default_config.augment, is_real=False,
                             rng=item_rng(s))
            assert ops.scale is None

    def test_real_domain_scales(self, default_config):
        lo, hi = default_config.augment.real_scale_range
        for s in range(50):
            ops = sample_ops(default_config.augment, is_real=True,
                             rng=item_rng(s))
            assert lo <= ops.scale <= hi

    def test_flip_frequency(self, default_config):
        n = 10_000
        rng = item_rng(77)
        flips_x = sum(sample_ops(default_config.augment, False, rng).flip_x
                      for _ in range(n))
        assert abs(flips_x / n - default_config.augment.flip_prob) < 0.02

    def test_noiseless_flip_only_preserves_geometry(self, default_config):
        # pixel flip + label flip must stay consistent through the pipeline
        config = AugmentConfig(noise_std_hu=0.0, blur_sigma_range=(1e-9, 1e-9))
        label = AirwayLabel(R_A=3.0, R_B=2.6, W_A=4.0, W_B=3.6,
                            C_x=0.8, C_y=-0.6, theta=0.9)
        patch = render_patch(label, default_config.synth, seed=0)
        ops = AugmentOps(scale=None, blur_sigma=0.0, flip_x=True, flip_y=True)
        out = apply_ops(patch, ops, config, item_rng(0))
        re_rendered = render_patch(out.label, default_config.synth, seed=0)
        expected = standardize_array(re_rendered.pixels)
        assert float(np.max(np.abs(out.pixels - center_crop(expected, 32)))) < 1e-4
