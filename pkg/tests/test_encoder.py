"""
单图推断的测试：坐标通道、U-net 分辨率、先验采样与区分背景的槽注意力。
"""

import numpy as np
import pytest

from sceneslots_core.config_manager import ModelConfig
from sceneslots_core.encoder import (
    BackgroundAwareSlotAttention, FeatureMap, SceneEncoder, SlotPriors, SlotSet, UNetEncoder,
    coordinate_channels, max_slot_similarity,
)
from sceneslots_core.scene_model import SceneModel
from sceneslots_core.tensor import ShapeError, Tensor


@pytest.fixture
def model_config(tiny_config) -> ModelConfig:
    return tiny_config.model


class TestCoordinateChannels:
    def test_layout(self):
        coords = coordinate_channels(5, 5)
        assert coords.shape == (4, 5, 5)
        np.testing.assert_array_equal(coords[:, 2, 2], np.zeros(4))
        np.testing.assert_allclose(coords[0, 0], np.linspace(-1.0, 1.0, 5))
        np.testing.assert_allclose(coords[2], -coords[0])
        np.testing.assert_allclose(coords[3], -coords[1])


class TestUNetEncoder:
    """compact 保持分辨率，stem 输出减半。"""

    def test_compact_keeps_resolution(self, float64, rng):
        unet = UNetEncoder(3, 4, rng, variant="compact")
        out = unet(Tensor(rng.standard_normal((7, 8, 8))))
        assert out.shape == (4, 8, 8)
        assert np.all(out.data >= 0)

    def test_stem_halves_resolution(self, float64, rng):
        unet = UNetEncoder(3, 4, rng, variant="stem")
        assert unet(Tensor(rng.standard_normal((7, 8, 8)))).shape == (4, 4, 4)

    def test_zero_weights_zero_features(self, float64, rng):
        unet = UNetEncoder(3, 4, rng)
        for p in unet.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(unet(Tensor(np.zeros((7, 8, 8)))).data, 0.0)

    def test_rejects_channels_and_variant(self, float64, rng):
        with pytest.raises(ShapeError):
            UNetEncoder(3, 4, rng)(Tensor(np.zeros((3, 8, 8))))
        with pytest.raises(ValueError):
            UNetEncoder(3, 4, rng, variant="wide")


class TestSlotPriors:
    """重参数化采样。"""

    def test_same_seed_same_slots(self, float64, rng):
        priors = SlotPriors(4, rng)
        a, b = priors.sample(3, seed=11), priors.sample(3, seed=11)
        np.testing.assert_array_equal(a.foreground.data, b.foreground.data)
        np.testing.assert_array_equal(a.background.data, b.background.data)
        c = priors.sample(3, seed=12)
        assert not np.array_equal(a.foreground.data, c.foreground.data)

    def test_vanishing_scale_gives_mean(self, float64, rng):
        priors = SlotPriors(4, rng)
        priors.log_sigma_fg.data[...] = -50.0
        priors.log_sigma_bg.data[...] = -50.0
        slots = priors.sample(3, seed=0)
        np.testing.assert_allclose(slots.foreground.data, np.broadcast_to(priors.mu_fg.data, (3, 4)), atol=1e-15)
        np.testing.assert_allclose(slots.background.data[0], priors.mu_bg.data, atol=1e-15)

    def test_monte_carlo_mean(self, float64, rng):
        priors = SlotPriors(2, rng)
        slots = priors.sample(100_000, seed=3)
        sigma = np.exp(priors.log_sigma_fg.data)
        error = np.abs(slots.foreground.data.mean(axis=0) - priors.mu_fg.data)
        assert np.all(error < 4 * sigma / np.sqrt(100_000) + 1e-12)


class TestSlotAttention:
    """softmax 沿槽轴，权重按槽归一化。"""

    def test_single_feature_gives_unit_weights(self, float64, rng):
        attention = BackgroundAwareSlotAttention(4, 4, 2, rng)
        feat = FeatureMap(Tensor(rng.standard_normal((1, 4))), 1, 1)
        init = SlotSet(Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((3, 4))))
        out = attention(feat, init)
        assert out.foreground.shape == (3, 4) and out.background.shape == (1, 4)
        trace = attention.last_trace
        np.testing.assert_allclose(trace.attention.sum(axis=1), 1.0)
        np.testing.assert_allclose(trace.weights, 1.0, atol=1e-9)

    def test_zero_queries_give_uniform_attention(self, float64, rng):
        attention = BackgroundAwareSlotAttention(4, 4, 1, rng)
        attention.to_q_bg.weight.data[...] = 0.0
        attention.to_q_fg.weight.data[...] = 0.0
        feat = FeatureMap(Tensor(rng.standard_normal((6, 4))), 2, 3)
        init = SlotSet(Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((2, 4))))
        attention(feat, init)
        np.testing.assert_allclose(attention.last_trace.attention, np.full((6, 3), 1.0 / 3.0))

    def test_identical_slots_stay_identical(self, float64, rng):
        attention = BackgroundAwareSlotAttention(4, 4, 3, rng)
        feat = FeatureMap(Tensor(rng.standard_normal((5, 4))), 5, 1)
        same = rng.standard_normal((1, 4))
        init = SlotSet(Tensor(rng.standard_normal((1, 4))), Tensor(np.repeat(same, 2, axis=0)))
        out = attention(feat, init).foreground.data
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)
        assert max_slot_similarity(out) == pytest.approx(1.0)

    def test_foreground_permutation_equivariant(self, float64, rng):
        attention = BackgroundAwareSlotAttention(4, 6, 3, rng)
        feat = FeatureMap(Tensor(rng.standard_normal((12, 4))), 3, 4)
        background = rng.standard_normal((1, 4))
        foreground = rng.standard_normal((4, 4))
        out = attention(feat, SlotSet(Tensor(background), Tensor(foreground)))
        for _ in range(5):
            order = rng.permutation(4)
            permuted = attention(feat, SlotSet(Tensor(background), Tensor(foreground[order])))
            np.testing.assert_allclose(permuted.foreground.data, out.foreground.data[order], atol=1e-12)
            np.testing.assert_allclose(permuted.background.data, out.background.data, atol=1e-12)

    def test_dimension_mismatch(self, float64, rng):
        attention = BackgroundAwareSlotAttention(4, 4, 1, rng)
        feat = FeatureMap(Tensor(np.ones((2, 3))), 2, 1)
        init = SlotSet(Tensor(np.ones((1, 4))), Tensor(np.ones((2, 4))))
        with pytest.raises(ShapeError):
            attention(feat, init)


class TestSceneEncoder:
    """图像到 SlotSet 的完整推断。"""

    def test_encode_shapes_and_determinism(self, float64, model_config, rng):
        encoder = SceneEncoder(model_config, np.random.default_rng(0))
        image = Tensor(rng.random((3, 8, 8)))
        a, b = encoder(image, seed=5), encoder(image, seed=5)
        assert a.num_slots == model_config.num_slots
        assert a.dim == model_config.slot_dim
        np.testing.assert_array_equal(a.foreground.data, b.foreground.data)

    def test_features_independent_of_camera(self, float64, model_config, small_view, rng):
        encoder = SceneEncoder(model_config, np.random.default_rng(0))
        image = Tensor(rng.random((3, 8, 8)))
        with_camera = encoder.extract_features(image, small_view)
        assert with_camera.count == 64
        np.testing.assert_array_equal(with_camera.features.data, encoder.extract_features(image).features.data)

    def test_rejects_wrong_resolution(self, float64, model_config):
        encoder = SceneEncoder(model_config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            encoder(Tensor(np.zeros((3, 16, 16))), seed=0)

    def test_model_resizes_input(self, float64, model_config, rng):
        model = SceneModel(model_config, seed=0)
        slots = model.encode(Tensor(rng.random((3, 16, 16))), seed=1)
        assert slots.foreground.shape == (model_config.num_slots, model_config.slot_dim)

    def test_collapse_flag(self, float64, model_config):
        encoder = SceneEncoder(model_config, np.random.default_rng(0))
        encoder.last_similarity = 0.9999
        assert encoder.collapsed
        assert max_slot_similarity(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(0.0)
        assert max_slot_similarity(np.ones((1, 3))) == 0.0

    def test_slot_set_validation(self, float64):
        with pytest.raises(ShapeError):
            SlotSet(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))))
        with pytest.raises(ShapeError):
            SlotSet(Tensor(np.ones((1, 4))), Tensor(np.ones((3, 5))))
