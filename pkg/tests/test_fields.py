"""
条件辐射场的测试：观察者坐标变换、局部性约束盒、解码器输出范围与共享前景参数。
"""

import numpy as np
import pytest

from sceneslots_core.camera import CameraView
from sceneslots_core.fields import (
    FieldQuery, LocalityBox, RadianceDecoder, decode_background, decode_foreground, viewer_to_world, world_to_viewer,
)
from sceneslots_core.nets import PositionalEncoder
from sceneslots_core.renderer import VolumeRenderer
from sceneslots_core.scene_model import SceneModel
from sceneslots_core.tensor import ShapeError, Tensor, no_grad


@pytest.fixture
def model(tiny_config, float64):
    return SceneModel(tiny_config.model, seed=0)


@pytest.fixture
def slots(model, rng):
    with no_grad():
        return model.encode(Tensor(rng.random((3, 8, 8))), seed=2)


class TestCoordinates:
    def test_identity_pose_is_noop(self, rng):
        view = CameraView.identity(4, 4, focal=2.0, near=0.1, far=3.0)
        points = rng.standard_normal((5, 3))
        np.testing.assert_allclose(world_to_viewer(points, view), points)

    def test_roundtrip(self, small_view, rng):
        points = rng.standard_normal((5, 3))
        np.testing.assert_allclose(viewer_to_world(world_to_viewer(points, small_view), small_view), points, atol=1e-12)

    def test_camera_center_maps_to_origin(self, small_view):
        np.testing.assert_allclose(world_to_viewer(small_view.position[None], small_view), np.zeros((1, 3)), atol=1e-12)

    def test_query_rejects_non_finite(self, small_view):
        with pytest.raises(ValueError):
            FieldQuery(np.array([[np.nan, 0.0, 0.0]]), small_view)


class TestLocalityBox:
    """观察者坐标中的轴对齐盒。"""

    def test_contains(self):
        box = LocalityBox(half_extent=1.0, near=0.5, far=4.0)
        inside = np.array([[0.0, 0.5, -2.0]])
        outside = np.array([[0.0, 0.0, -0.1], [2.0, 0.0, -2.0], [0.0, 0.0, -5.0]])
        assert box.contains(inside).all()
        assert not box.contains(outside).any()

    def test_for_view_covers_image(self, small_view):
        box = LocalityBox.for_view(small_view, center_distance=3.0, coverage=1.0)
        # 盒子在中心深度处的投影边长等于图像边长
        assert 2 * box.half_extent * small_view.focal / 3.0 == pytest.approx(small_view.width)
        assert (box.near, box.far) == (small_view.near, small_view.far)

    def test_invalid(self, small_view):
        with pytest.raises(ValueError):
            LocalityBox(half_extent=0.0, near=0.5, far=4.0)
        with pytest.raises(ValueError):
            LocalityBox.for_view(small_view, 3.0, coverage=0.0)


class TestRadianceDecoder:
    """σ = ReLU(·) ≥ 0，c = sigmoid(·) ∈ (0,1)。"""

    def test_output_ranges(self, float64, rng):
        decoder = RadianceDecoder(33, 4, 8, 3, rng, skip_layer=1)
        encoded = PositionalEncoder(5)(Tensor(rng.standard_normal((6, 3))))
        color, density = decoder(encoded, Tensor(rng.standard_normal((2, 4))))
        assert color.shape == (2, 6, 3) and density.shape == (2, 6)
        assert np.all(density.data >= 0)
        assert np.all((color.data > 0) & (color.data < 1))

    def test_zero_heads(self, float64, rng):
        decoder = RadianceDecoder(33, 4, 8, 3, rng)
        for head in (decoder.density_head, decoder.color_head):
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0
        encoded = PositionalEncoder(5)(Tensor(rng.standard_normal((6, 3))))
        color, density = decoder(encoded, Tensor(rng.standard_normal((2, 4))))
        np.testing.assert_array_equal(density.data, 0.0)
        np.testing.assert_allclose(color.data, 0.5)

    def test_latents_change_output(self, float64, rng):
        decoder = RadianceDecoder(33, 4, 16, 3, rng, skip_layer=1)
        encoded = PositionalEncoder(5)(Tensor(rng.standard_normal((4, 3))))
        differ = 0
        for _ in range(100):
            color, _ = decoder(encoded, Tensor(rng.standard_normal((2, 4))))
            differ += not np.allclose(color.data[0], color.data[1])
        assert differ == 100

    def test_latent_shape_checked(self, float64, rng):
        decoder = RadianceDecoder(33, 4, 8, 3, rng)
        with pytest.raises(ShapeError):
            decoder(Tensor(np.zeros((2, 33))), Tensor(np.zeros((2, 5))))


class TestNeuralSceneFields:
    """K+1 分量的场景场与查询时编辑。"""

    def test_box_zeroes_outside_density(self, model, slots, small_view):
        box = LocalityBox(half_extent=0.1, near=small_view.near, far=small_view.far)
        scene = model.scene_fields(slots, small_view, box=box)
        far_points = viewer_to_world(np.array([[5.0, 5.0, -2.0], [0.0, 0.0, -0.5]]), small_view)
        batch = scene.evaluate(far_points)
        assert batch.num_components == model.config.num_slots + 1
        np.testing.assert_array_equal(batch.density.data[1:], 0.0)

    def test_box_exterior_density_zero_everywhere(self, model, slots, small_view, rng):
        box = LocalityBox(half_extent=0.4, near=small_view.near, far=small_view.far)
        scene = model.scene_fields(slots, small_view, box=box)
        candidates = viewer_to_world(rng.uniform(-6.0, 6.0, size=(4000, 3)), small_view)
        exterior = candidates[~box.contains(world_to_viewer(candidates, small_view))][:1000]
        assert len(exterior) == 1000
        batch = scene.evaluate(exterior)
        np.testing.assert_array_equal(batch.density.data[1:], 0.0)
        assert np.all(batch.density.data[0] >= 0.0)

    def test_decode_foreground_matches_scene(self, model, slots, small_view, rng):
        points = rng.standard_normal((7, 3))
        box = model.locality_box(small_view)
        scene = model.scene_fields(slots, small_view, box=box)
        batch = scene.evaluate(points)
        color, density = decode_foreground(model.fg_decoder, model.pe, FieldQuery(points, small_view),
                                           slots.foreground[1], box, model.config.scene_scale)
        np.testing.assert_allclose(density.data, batch.density.data[2], atol=1e-12)
        np.testing.assert_allclose(color.data, batch.color.data[2], atol=1e-12)

    def test_decode_background_matches_scene(self, model, slots, small_view, rng):
        points = rng.standard_normal((7, 3))
        batch = model.scene_fields(slots, small_view).evaluate(points)
        color, density = decode_background(model.bg_decoder, model.pe, points, slots.background, model.config.scene_scale)
        np.testing.assert_allclose(density.data, batch.density.data[0], atol=1e-12)
        np.testing.assert_allclose(color.data, batch.color.data[0], atol=1e-12)

    def test_removed_slot_has_no_density(self, model, slots, small_view, rng):
        removed = np.array([False, True])
        scene = model.scene_fields(slots, small_view, removed=removed)
        batch = scene.evaluate(rng.standard_normal((3, 4, 3)))
        assert batch.density.shape == (3, 3, 4)
        np.testing.assert_array_equal(batch.density.data[2], 0.0)

    def test_edit_shape_checked(self, model, slots, small_view):
        with pytest.raises(ShapeError):
            model.scene_fields(slots, small_view, translations=np.zeros((3, 3)))

    def test_shared_foreground_decoder(self, model):
        names = [name for name, _ in model.named_parameters()]
        fg = [n for n in names if n.startswith("fg_decoder.")]
        assert len(fg) == len(list(model.fg_decoder.named_parameters()))
        assert all(n.split(".")[0] in ("encoder", "fg_decoder", "bg_decoder") for n in names)

    def test_zero_decoders_render_black(self, model, slots, small_view):
        for decoder in (model.fg_decoder, model.bg_decoder):
            decoder.density_head.weight.data[...] = 0.0
            decoder.density_head.bias.data[...] = 0.0
        scene = model.scene_fields(slots, small_view)
        rgb, _, opacity = VolumeRenderer().render_maps(scene, small_view, 4)
        np.testing.assert_array_equal(rgb, 0.0)
        np.testing.assert_array_equal(opacity, 0.0)

    def test_bit_identical_evaluation(self, model, slots, small_view, rng):
        points = rng.standard_normal((2, 5, 3))
        scene = model.scene_fields(slots, small_view)
        a, b = scene.evaluate(points), scene.evaluate(points)
        np.testing.assert_array_equal(a.color.data, b.color.data)
        np.testing.assert_array_equal(a.density.data, b.density.data)
