import numpy as np
import pytest
import torch

from airwaykit.errors import ConfigError, DataError
from airwaykit.perceptual import (CANONICAL_LAYERS, PerceptualLossConfig,
                                  ablation_layer_sets, build_extractor,
                                  extract_features, feature_loss, gram,
                                  hermetic_extractor, refinement_loss,
                                  style_loss)
from airwaykit.util import item_rng

from .oracles import (IdentityStubExtractor, finite_difference_gradient,
                      loop_composite, loop_feature_loss, loop_gram,
                      loop_style_loss)

STUB = IdentityStubExtractor()


def rand(shape, seed, scale=1.0):
    return item_rng(seed).normal(size=shape).astype(np.float64) * scale


class TestExtractor:
    def test_same_input_same_activations(self):
        ext = hermetic_extractor(seed=0)
        x = rand((1, 1, 32, 32), 5)
        a = extract_features(ext, torch.tensor(x, dtype=torch.float32))
        b = extract_features(ext, torch.tensor(x, dtype=torch.float32))
        for name in CANONICAL_LAYERS:
            assert torch.equal(a[name], b[name])

    def test_zero_input_zero_activations_on_stub(self):
        acts = STUB.features(torch.zeros(1, 1, 32, 32))
        for name in CANONICAL_LAYERS:
            assert torch.all(acts[name] == 0)

    def test_hermetic_activation_shapes(self):
        # two stride-1 blocks then a 2x pool before each deeper tap
        ext = hermetic_extractor(seed=0)
        acts = extract_features(ext, torch.zeros(1, 1, 32, 32))
        got = {k: tuple(v.shape[1:]) for k, v in acts.items()}
        assert got["relu1_2"] == (8, 32, 32)
        assert got["relu2_2"] == (16, 16, 16)
        assert got["relu3_3"] == (32, 8, 8)
        assert got["relu4_3"] == (64, 4, 4)

    def test_hermetic_seed_changes_weights(self):
        x = torch.tensor(rand((1, 1, 32, 32), 3), dtype=torch.float32)
        a = extract_features(hermetic_extractor(seed=0), x)
        b = extract_features(hermetic_extractor(seed=1), x)
        assert not torch.allclose(a["relu1_2"], b["relu1_2"])

    def test_weights_frozen(self):
        ext = hermetic_extractor(seed=0)
        assert all(not p.requires_grad for p in ext.parameters())

    def test_wrong_input_size_rejected(self):
        with pytest.raises(DataError):
            extract_features(hermetic_extractor(seed=0),
                             torch.zeros(1, 1, 16, 16))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            build_extractor("mystery")


class TestFeatureLoss:
    def test_identity_is_zero(self):
        x = torch.tensor(rand((2, 1, 32, 32), 7))
        assert feature_loss(STUB, ("relu3_3",), x, x).item() == 0.0

    def test_ones_vs_zeros_is_one(self):
        y_hat = torch.ones(1, 1, 32, 32, dtype=torch.float64)
        x = torch.zeros(1, 1, 32, 32, dtype=torch.float64)
        loss = feature_loss(STUB, ("relu3_3",), y_hat, x)
        assert loss.item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        a = rand((3, 1, 32, 32), 11)
        b = rand((3, 1, 32, 32), 12)
        got = feature_loss(STUB, ("relu3_3",),
                           torch.tensor(a), torch.tensor(b)).item()
        want = loop_feature_loss(a, b, norm="l1")
        assert got == pytest.approx(want, abs=1e-6)

    def test_l2_matches_loop_oracle(self):
        a = rand((2, 1, 32, 32), 13)
        b = rand((2, 1, 32, 32), 14)
        got = feature_loss(STUB, ("relu3_3",), torch.tensor(a),
                           torch.tensor(b), norm="l2").item()
        want = loop_feature_loss(a, b, norm="l2")
        assert got == pytest.approx(want, abs=1e-6)

    def test_unknown_layer_rejected(self):
        x = torch.zeros(1, 1, 32, 32)
        with pytest.raises(ConfigError):
            feature_loss(STUB, ("relu9_9",), x, x)


class TestGram:
    def test_all_ones_1x2x2(self):
        g = gram(torch.ones(1, 2, 2, dtype=torch.float64))
        assert g.shape == (1, 1)
        assert g[0, 0].item() == pytest.approx(1.0, abs=1e-12)

    def test_zero_activations(self):
        g = gram(torch.zeros(3, 4, 4))
        assert torch.all(g == 0)

    def test_matches_triple_loop_oracle(self):
        a = rand((3, 4, 4), 21)
        got = gram(torch.tensor(a)).numpy()
        want = loop_gram(a)
        assert np.max(np.abs(got - want)) < 1e-6

    def test_positive_semidefinite(self):
        for seed in range(5):
            a = rand((6, 5, 5), 100 + seed)
            eigenvalues = np.linalg.eigvalsh(gram(torch.tensor(a)).numpy())
            assert eigenvalues.min() >= -1e-8

    def test_symmetric(self):
        g = gram(torch.tensor(rand((4, 3, 3), 31))).numpy()
        assert np.allclose(g, g.T)


class TestStyleLoss:
    def test_identity_is_zero(self):
        y = torch.tensor(rand((2, 1, 32, 32), 41))
        assert style_loss(STUB, ("relu1_2",), y, y).item() == 0.0

    def test_matches_loop_oracle(self):
        a = rand((2, 1, 16, 16), 42)
        b = rand((2, 1, 16, 16), 43)
        got = style_loss(STUB, ("relu1_2",), torch.tensor(a),
                         torch.tensor(b)).item()
        want = loop_style_loss(a, b)
        assert got == pytest.approx(want, abs=1e-6)

    def test_two_channel_hand_example(self):
        # 2 channels of 1x2: a = [[1, 2], [3, 4]], b = [[0, 1], [1, 0]]
        # gram(a) = [[5, 11], [11, 25]] / 4; gram(b) = [[1, 0], [0, 1]] / 4
        # |diff|.sum() = (4 + 11 + 11 + 24) / 4 = 12.5; /(c*h*w)=12.5/4=3.125
        a = torch.tensor([[[[1.0, 2.0]], [[3.0, 4.0]]]], dtype=torch.float64)
        b = torch.tensor([[[[0.0, 1.0]], [[1.0, 0.0]]]], dtype=torch.float64)
        got = style_loss(STUB, ("relu1_2",), a, b).item()
        assert got == pytest.approx(3.125, abs=1e-12)

    def test_cumulative_equals_sum_of_singles(self):
        ext = hermetic_extractor(seed=0)
        y_hat = torch.tensor(rand((2, 1, 32, 32), 44), dtype=torch.float32)
        y_sty = torch.tensor(rand((2, 1, 32, 32), 45), dtype=torch.float32)
        cumulative = style_loss(ext, CANONICAL_LAYERS, y_hat, y_sty).item()
        singles = sum(style_loss(ext, (name,), y_hat, y_sty).item()
                      for name in CANONICAL_LAYERS)
        assert cumulative == pytest.approx(singles, rel=1e-6)

    def test_ablation_layer_sets_are_cumulative(self):
        sets = ablation_layer_sets()
        assert sets[0] == ("relu1_2",)
        assert sets[-1] == CANONICAL_LAYERS
        for i, layer_set in enumerate(sets):
            assert layer_set == CANONICAL_LAYERS[:i + 1]

    def test_config_cumulative_resolution(self):
        config = PerceptualLossConfig(style_layers=("relu3_3",),
                                      style_cumulative=True)
        assert config.resolved_style_layers() == ("relu1_2", "relu2_2",
                                                  "relu3_3")


class TestComposite:
    def test_all_identities_give_zero(self):
        x = torch.tensor(rand((2, 1, 32, 32), 51))
        out = refinement_loss(STUB, PerceptualLossConfig(), x, x, x)
        assert out.total.item() == 0.0
        assert out.feature == 0.0 and out.style == 0.0 and out.reg == 0.0

    def test_doubling_lambda_doubles_only_reg(self):
        x = torch.tensor(rand((2, 1, 32, 32), 52))
        y_hat = torch.tensor(rand((2, 1, 32, 32), 53))
        y_sty = torch.tensor(rand((2, 1, 32, 32), 54))
        one = refinement_loss(STUB, PerceptualLossConfig(reg_lambda=0.01),
                              x, y_hat, y_sty)
        two = refinement_loss(STUB, PerceptualLossConfig(reg_lambda=0.02),
                              x, y_hat, y_sty)
        assert two.feature == one.feature
        assert two.style == one.style
        assert two.reg == one.reg
        delta = two.total.item() - one.total.item()
        assert delta == pytest.approx(0.01 * one.reg, rel=1e-9)

    def test_matches_scripted_oracle(self):
        x = rand((2, 1, 32, 32), 55)
        y_hat = rand((2, 1, 32, 32), 56)
        y_sty = rand((2, 1, 32, 32), 57)
        config = PerceptualLossConfig(feature_layers=("relu3_3",),
                                      style_layers=("relu1_2", "relu2_2"),
                                      reg_lambda=0.01)
        got = refinement_loss(STUB, config, torch.tensor(x),
                              torch.tensor(y_hat), torch.tensor(y_sty))
        want = loop_composite(x, y_hat, y_sty,
                              feature_layers=config.feature_layers,
                              style_layers=config.style_layers,
                              reg_lambda=config.reg_lambda)
        assert got.total.item() == pytest.approx(want, abs=1e-6)

    def test_total_combines_reported_terms(self):
        x = torch.tensor(rand((1, 1, 32, 32), 58))
        y_hat = torch.tensor(rand((1, 1, 32, 32), 59))
        y_sty = torch.tensor(rand((1, 1, 32, 32), 60))
        config = PerceptualLossConfig(feature_weight=2.0, style_weight=3.0,
                                      reg_lambda=0.5)
        out = refinement_loss(STUB, config, x, y_hat, y_sty)
        want = 2.0 * out.feature + 3.0 * out.style + 0.5 * out.reg
        assert out.total.item() == pytest.approx(want, rel=1e-12)


class TestGradients:
    def test_composite_gradient_matches_finite_differences(self):
        x = torch.tensor(rand((1, 1, 32, 32), 61))
        y_sty = torch.tensor(rand((1, 1, 32, 32), 62))
        y_hat = torch.tensor(rand((1, 1, 32, 32), 63), requires_grad=True)
        config = PerceptualLossConfig()

        out = refinement_loss(STUB, config, x, y_hat, y_sty)
        out.total.backward()
        analytic = y_hat.grad.detach().numpy().ravel()

        probe = torch.tensor(rand((1, 1, 32, 32), 63))
        indices = item_rng(99).choice(probe.numel(), size=12, replace=False)

        def value():
            return refinement_loss(STUB, config, x, probe, y_sty).total.item()

        numeric = finite_difference_gradient(value, probe, indices)
        for k, idx in enumerate(indices):
            denom = max(abs(numeric[k]), abs(analytic[idx]), 1e-12)
            assert abs(numeric[k] - analytic[idx]) / denom < 1e-4

    def test_hermetic_gradient_matches_finite_differences(self):
        ext = hermetic_extractor(seed=0).double()
        x = torch.tensor(rand((1, 1, 32, 32), 71))
        y_sty = torch.tensor(rand((1, 1, 32, 32), 72))
        y_hat = torch.tensor(rand((1, 1, 32, 32), 73), requires_grad=True)
        config = PerceptualLossConfig()

        out = refinement_loss(ext, config, x, y_hat, y_sty)
        out.total.backward()
        analytic = y_hat.grad.detach().numpy().ravel()

        probe = torch.tensor(rand((1, 1, 32, 32), 73))
        indices = item_rng(98).choice(probe.numel(), size=6, replace=False)

        def value():
            return refinement_loss(ext, config, x, probe, y_sty).total.item()

        numeric = finite_difference_gradient(value, probe, indices)
        for k, idx in enumerate(indices):
            denom = max(abs(numeric[k]), abs(analytic[idx]), 1e-12)
            assert abs(numeric[k] - analytic[idx]) / denom < 1e-4
