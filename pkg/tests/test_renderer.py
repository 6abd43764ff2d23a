"""
体渲染的测试：分层采样、按密度加权合成、体渲染积分的闭式解与分块/图块一致性。
"""

import math

import numpy as np
import pytest

from sceneslots_core.fields import RadianceSampleBatch, SceneFields
from sceneslots_core.parallel import ThreadPoolStrategy
from sceneslots_core.renderer import (
    RayBatch, SampleGrid, VolumeRenderer, compose, generate_rays, integrate, stratified_sample,
)
from sceneslots_core.scenegen import AnalyticSceneFields, sample_scene
from sceneslots_core.tensor import Tensor, no_grad


class ConstantFields(SceneFields):
    """每个分量在所有点上密度与颜色都是常数。"""

    def __init__(self, densities, colors):
        self.densities = np.asarray(densities, dtype=np.float64)
        self.colors = np.asarray(colors, dtype=np.float64)

    @property
    def num_components(self) -> int:
        return len(self.densities)

    def evaluate(self, points_world: np.ndarray) -> RadianceSampleBatch:
        lead = np.asarray(points_world).shape[:-1]
        n = self.num_components
        density = np.broadcast_to(self.densities.reshape((n,) + (1,) * len(lead)), (n,) + lead)
        color = np.broadcast_to(self.colors.reshape((n,) + (1,) * len(lead) + (3,)), (n,) + lead + (3,))
        return RadianceSampleBatch(color=Tensor(color.copy()), density=Tensor(density.copy()))


def single_ray(near: float, far: float) -> RayBatch:
    return RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]), near, far, np.array([0]))


def batch(densities, colors) -> RadianceSampleBatch:
    return RadianceSampleBatch(color=Tensor(np.asarray(colors, dtype=np.float64)),
                               density=Tensor(np.asarray(densities, dtype=np.float64)))


@pytest.fixture
def analytic_scene(tiny_config):
    return AnalyticSceneFields(sample_scene(tiny_config.scenegen, seed=3))


# =============================================================================
# 采样
# =============================================================================

class TestStratifiedSample:
    """等分区间与计数器抖动。"""

    def test_single_sample_is_midpoint(self):
        grid = stratified_sample(single_ray(1.0, 3.0), 1)
        np.testing.assert_allclose(grid.depths, [[2.0]])
        np.testing.assert_allclose(grid.deltas, [[1.0]])

    def test_midpoints_without_jitter(self):
        grid = stratified_sample(single_ray(0.0, 1.0), 4)
        np.testing.assert_allclose(grid.depths[0], [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(grid.deltas[0], [0.25, 0.25, 0.25, 0.125])

    def test_jitter_stays_in_bins_and_repeats(self):
        rays = single_ray(0.0, 1.0)
        a = stratified_sample(rays, 8, seed=5, step=2, jitter=True)
        b = stratified_sample(rays, 8, seed=5, step=2, jitter=True)
        c = stratified_sample(rays, 8, seed=5, step=3, jitter=True)
        np.testing.assert_array_equal(a.depths, b.depths)
        assert not np.array_equal(a.depths, c.depths)
        bins = np.floor(a.depths[0] * 8)
        np.testing.assert_array_equal(bins, np.arange(8))
        assert np.all(np.diff(a.depths[0]) > 0)

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            stratified_sample(single_ray(0.0, 1.0), 0)


# =============================================================================
# 合成与积分
# =============================================================================

class TestCompose:
    """w_i = σ_i / Σσ 的加权平均。"""

    def test_single_component_recovery(self, float64):
        c = [0.2, 0.4, 0.6]
        sigma, rgb, weights = compose(batch([[2.0], [0.0], [0.0]], [[c], [[1, 1, 1]], [[0, 0, 0]]]))
        np.testing.assert_allclose(sigma.data, [2.0])
        np.testing.assert_allclose(rgb.data, [c])
        np.testing.assert_allclose(weights.data[:, 0], [1.0, 0.0, 0.0])

    def test_two_equal_components(self, float64):
        c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
        sigma, rgb, weights = compose(batch([[1.0], [1.0]], [[c1], [c2]]))
        np.testing.assert_allclose(weights.data[:, 0], [0.5, 0.5])
        np.testing.assert_allclose(sigma.data, [1.0])
        np.testing.assert_allclose(rgb.data[0], (c1 + c2) / 2)

    def test_all_zero_density(self, float64):
        sigma, rgb, _ = compose(batch([[0.0], [0.0]], [[[1, 1, 1]], [[0.5, 0.5, 0.5]]]))
        np.testing.assert_array_equal(sigma.data, [0.0])
        np.testing.assert_array_equal(rgb.data, [[0.0, 0.0, 0.0]])

    def test_negative_density_rejected(self, float64):
        with pytest.raises(ValueError):
            compose(batch([[-1.0], [1.0]], [[[1, 1, 1]], [[1, 1, 1]]]))


class TestIntegrate:
    """体渲染积分的闭式解。"""

    def test_empty_space(self, float64):
        grid = stratified_sample(single_ray(0.0, 1.0), 8)
        out = integrate(Tensor(np.zeros((1, 8))), Tensor(np.ones((1, 8, 3))), grid)
        np.testing.assert_array_equal(out.rgb.data, [[0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(out.opacity.data, [0.0])

    def test_slab_oracle(self, float64):
        grid = stratified_sample(single_ray(1.0, 2.0), 256)
        out = integrate(Tensor(np.ones((1, 256))), Tensor(np.ones((1, 256, 3))), grid)
        np.testing.assert_allclose(out.rgb.data[0], np.full(3, 1.0 - math.exp(-1.0)), atol=1e-3)

    def test_two_samples(self, float64):
        c1, c2 = np.array([1.0, 0.5, 0.0]), np.array([0.0, 0.5, 1.0])
        grid = SampleGrid(depths=np.array([[0.25, 0.75]]), deltas=np.array([[0.5, 0.5]]))
        out = integrate(Tensor([[2.0, 2.0]]), Tensor(np.stack([c1, c2])[None]), grid)
        a = 1.0 - math.exp(-1.0)
        np.testing.assert_allclose(out.rgb.data[0], a * c1 + math.exp(-1.0) * a * c2, atol=1e-12)
        np.testing.assert_allclose(out.opacity.data[0], 1.0 - math.exp(-2.0), atol=1e-12)


# =============================================================================
# 整幅渲染
# =============================================================================

class TestVolumeRenderer:
    """密度图、图块一致性与分块/并行不改变结果。"""

    def test_background_only_labels_zero(self, float64, small_view):
        fields = ConstantFields([0.5, 0.0, 0.0], np.ones((3, 3)))
        maps = VolumeRenderer().render_slot_density_maps(fields, small_view, 8)
        assert maps.maps.shape == (3, 8, 8)
        assert np.all(maps.labels == 0)

    def test_density_maps_partition_opacity(self, float64, analytic_scene):
        view = analytic_scene.spec.camera.views(8)[0]
        maps = VolumeRenderer().render_slot_density_maps(analytic_scene, view, 16)
        np.testing.assert_allclose(maps.maps.sum(axis=0), maps.opacity, atol=1e-6)
        assert maps.maps.shape[0] == analytic_scene.num_components

    def test_patch_equals_crop(self, float64, analytic_scene):
        view = analytic_scene.spec.camera.views(8)[1]
        renderer = VolumeRenderer(seed=7)
        with no_grad():
            full = renderer.render_image(analytic_scene, view, 8, step=4, jitter=True).data
            patch = renderer.render_patch(analytic_scene, view, 2, 3, 4, 8, step=4, jitter=True).data
        np.testing.assert_allclose(patch, full[:, 2:6, 3:7], atol=1e-10)

    def test_chunking_and_threads_do_not_change_output(self, float64, analytic_scene):
        view = analytic_scene.spec.camera.views(8)[0]
        with no_grad():
            whole = VolumeRenderer(chunk_size=4096).render_image(analytic_scene, view, 8).data
            chunked = VolumeRenderer(chunk_size=5).render_image(analytic_scene, view, 8).data
            strategy = ThreadPoolStrategy(3)
            try:
                threaded = VolumeRenderer(strategy, chunk_size=5).render_image(analytic_scene, view, 8).data
            finally:
                strategy.shutdown()
        np.testing.assert_allclose(chunked, whole, atol=1e-12)
        np.testing.assert_array_equal(threaded, chunked)

    def test_render_maps_shapes(self, float64, small_view):
        fields = ConstantFields([0.0, 2.0], [[0.0, 0.0, 0.0], [0.2, 0.4, 0.6]])
        rgb, depth, opacity = VolumeRenderer().render_maps(fields, small_view, 16)
        assert rgb.shape == (3, 8, 8) and depth.shape == (8, 8) and opacity.shape == (8, 8)
        assert np.all((opacity > 0) & (opacity <= 1.0))
        np.testing.assert_allclose(rgb[:, 0, 0] / opacity[0, 0], [0.2, 0.4, 0.6], atol=1e-9)

    def test_rays_from_view(self, small_view):
        rays = generate_rays(small_view)
        assert (rays.near, rays.far) == (small_view.near, small_view.far)
