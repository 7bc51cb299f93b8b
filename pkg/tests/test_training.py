import numpy as np
import pytest
import torch

from airwaykit.bundles import BundleWriter, open_bundle
from airwaykit.models import build_refiner, build_regressor
from airwaykit.synth import generate_dataset
from airwaykit.training import (BundleSampler, RefinerTrainConfig,
                                RegressorTrainConfig, eval_crops,
                                load_checkpoint, load_model,
                                lumen_radius_mae, save_checkpoint,
                                train_refiner, train_regressor)

from .oracles import IdentityStubExtractor


@pytest.fixture(scope="module")
def small_bundle(tmp_path_factory, default_config):
    out = tmp_path_factory.mktemp("bundles") / "train64"
    generate_dataset(64, default_config.synth, seed=60, out_path=out)
    return open_bundle(out, need_labels=True)


def state_equal(a, b):
    return (a.keys() == b.keys()
            and all(torch.equal(a[k], b[k]) for k in a))


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = build_refiner(seed=3, channels=8, n_blocks=1)
        history = [(1, 0.5, 0.4, 0.05, 0.05), (2, 0.4, 0.3, 0.05, 0.05)]
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, ("step", "total", "feature", "style", "reg"),
                        history, {"note": "test"})
        loaded, ckpt = load_model(path)
        assert state_equal(model.state_dict(), loaded.state_dict())
        assert ckpt.meta["note"] == "test"
        assert ckpt.history == [[1, 0.5, 0.4, 0.05, 0.05],
                                [2, 0.4, 0.3, 0.05, 0.05]]

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        model = build_refiner(seed=3, channels=8, n_blocks=1)
        for name in ("a.ckpt", "b.ckpt"):
            save_checkpoint(tmp_path / name, model, ("step",), [(1,)])
        assert ((tmp_path / "a.ckpt").read_bytes()
                == (tmp_path / "b.ckpt").read_bytes())


class TestBundleSampler:
    def test_same_key_same_batch(self, small_bundle, default_config):
        s = BundleSampler(small_bundle, default_config.augment,
                          is_real=False, seed=5)
        a = s.gather(np.arange(8), 1, 2, with_targets=True)
        b = s.gather(np.arange(8), 1, 2, with_targets=True)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_different_key_different_batch(self, small_bundle, default_config):
        s = BundleSampler(small_bundle, default_config.augment,
                          is_real=False, seed=5)
        a, _ = s.gather(np.arange(8), 1, 2, with_targets=True)
        b, _ = s.gather(np.arange(8), 1, 3, with_targets=True)
        assert not torch.equal(a, b)

    def test_batch_shape_and_standardization(self, small_bundle, default_config):
        s = BundleSampler(small_bundle, default_config.augment,
                          is_real=False, seed=5)
        x, y = s.gather(np.arange(4), 0, 0, with_targets=True)
        assert x.shape == (4, 1, 32, 32)
        assert y.shape == (4, 8)
        # center crop of a patch standardized over the full 80x80: the dark
        # lumen dominates the crop, so only boundedness is guaranteed
        assert torch.isfinite(x).all()
        assert x.abs().max().item() < 10.0


class TestTrainRefiner:
    def test_zero_steps_returns_initialization(self, small_bundle, default_config):
        refiner = build_refiner(seed=1, channels=8, n_blocks=1)
        before = {k: v.clone() for k, v in refiner.state_dict().items()}
        result = train_refiner(
            refiner, IdentityStubExtractor(),
            BundleSampler(small_bundle, default_config.augment, False, 1),
            BundleSampler(small_bundle, default_config.augment, True, 2),
            default_config.loss,
            RefinerTrainConfig(steps=0, batch_size=4, seed=1))
        assert result.steps_run == 0
        assert not result.diverged
        assert state_equal(before, result.model.state_dict())

    def test_loss_decreases_on_stub(self, small_bundle, default_config):
        # short run: average loss over the last 10 steps beats the first 10
        refiner = build_refiner(seed=1, channels=8, n_blocks=1)
        result = train_refiner(
            refiner, IdentityStubExtractor(),
            BundleSampler(small_bundle, default_config.augment, False, 1),
            BundleSampler(small_bundle, default_config.augment, True, 2),
            default_config.loss,
            RefinerTrainConfig(steps=60, batch_size=4, learning_rate=1e-3,
                               seed=1))
        totals = [row[1] for row in result.history]
        assert np.mean(totals[-10:]) < np.mean(totals[:10])

    def test_history_rows_track_steps(self, small_bundle, default_config):
        refiner = build_refiner(seed=1, channels=8, n_blocks=1)
        result = train_refiner(
            refiner, IdentityStubExtractor(),
            BundleSampler(small_bundle, default_config.augment, False, 1),
            BundleSampler(small_bundle, default_config.augment, True, 2),
            default_config.loss,
            RefinerTrainConfig(steps=5, batch_size=2, seed=1))
        assert [row[0] for row in result.history] == [1, 2, 3, 4, 5]
        for row in result.history:
            assert all(np.isfinite(v) for v in row[1:])


class TestTrainRegressor:
    def test_zero_epochs_returns_initialization(self, small_bundle, default_config):
        model = build_regressor(seed=2)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        result = train_regressor(model, small_bundle, default_config.augment,
                                 RegressorTrainConfig(epochs=0, batch_size=8,
                                                      seed=2))
        assert result.epochs_run == 0
        assert state_equal(before, result.model.state_dict())

    def test_overfits_repeated_patch(self, tmp_path, default_config):
        # 50 copies of one patch: training MSE must collapse below 1e-3
        out = tmp_path / "rep"
        from airwaykit.synth import render_patch, sample_label
        label = sample_label(default_config.synth, seed=3)
        patch = render_patch(label, default_config.synth, seed=3)
        with BundleWriter(out, height=80, width=80, pixel_spacing_mm=0.5) as w:
            for _ in range(50):
                w.add(patch.pixels, label)
        bundle = open_bundle(out, need_labels=True)
        from airwaykit.augment import AugmentConfig
        quiet = AugmentConfig(noise_std_hu=0.0, blur_sigma_range=(0.5, 0.5),
                              flip_prob=0.0)
        model = build_regressor(seed=3)
        result = train_regressor(
            model, bundle, quiet,
            RegressorTrainConfig(epochs=60, batch_size=16, learning_rate=1e-3,
                                 seed=3, val_fraction=0.0))
        assert result.history[-1][1] < 1e-3

    def test_val_split_and_history(self, small_bundle, default_config):
        model = build_regressor(seed=2)
        result = train_regressor(model, small_bundle, default_config.augment,
                                 RegressorTrainConfig(epochs=2, batch_size=16,
                                                      seed=2, val_fraction=0.25))
        assert len(result.history) == 2
        for epoch, train_mse, val_mse in result.history:
            assert np.isfinite(train_mse) and np.isfinite(val_mse)


class TestEvaluation:
    def test_eval_crops_shape(self, small_bundle):
        crops = eval_crops(small_bundle, 32)
        assert crops.shape == (64, 32, 32)
        # each crop standardized over the full 80x80 patch, then cropped
        assert np.isfinite(crops).all()

    def test_lumen_radius_mae_zero_for_perfect_predictor(self, small_bundle):
        # the MAE of a model is >= 0 and finite; exactness needs a trained model,
        # covered by the acceptance suite
        model = build_regressor(seed=0)
        mae = lumen_radius_mae(model, small_bundle)
        assert np.isfinite(mae) and mae >= 0
