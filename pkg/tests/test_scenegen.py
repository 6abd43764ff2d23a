"""
程序化数据集的测试：场景采样的确定性、无重叠放置、目录读写与校验。
"""

import dataclasses
import math
import shutil

import numpy as np
import pytest

from sceneslots_core.evaluator import psnr
from sceneslots_core.parallel import ThreadPoolStrategy
from sceneslots_core.scenegen import (
    MANIFEST_FILE, MASK_FILE_TEMPLATE, AnalyticSceneFields, DatasetValidationError, PlacementError, SceneSpec,
    generate_dataset, load_dataset, load_scene, render_dataset, sample_scene,
)


@pytest.fixture
def dataset_copy(tmp_path, tiny_dataset_dir):
    target = tmp_path / "dataset"
    shutil.copytree(tiny_dataset_dir, target)
    return target


class TestSampleScene:
    """按种子拒绝采样。"""

    def test_same_seed_same_scene(self, tiny_config):
        a = sample_scene(tiny_config.scenegen, seed=5)
        b = sample_scene(tiny_config.scenegen, seed=5)
        assert a.to_dict() == b.to_dict()
        assert SceneSpec.from_dict(a.to_dict()).to_dict() == a.to_dict()

    def test_object_count_no_overlap_inside_room(self, tiny_config):
        config = dataclasses.replace(tiny_config.scenegen, min_objects=3, max_objects=3, placement_radius=2.0,
                                     object_sizes=(0.3, 0.45))
        for seed in range(500):
            spec = sample_scene(config, seed)
            assert len(spec.objects) == 3
            for i, a in enumerate(spec.objects):
                assert a.center[2] == pytest.approx(a.size)
                assert math.hypot(a.center[0], a.center[1]) + a.footprint <= config.room_half_extent
                for b in spec.objects[i + 1:]:
                    gap = np.linalg.norm(np.subtract(a.center[:2], b.center[:2]))
                    assert gap >= a.footprint + b.footprint

    def test_fixed_count(self, tiny_config):
        config = dataclasses.replace(tiny_config.scenegen, min_objects=1, max_objects=1)
        assert {len(sample_scene(config, s).objects) for s in range(5)} == {1}

    def test_crowded_scene_fails(self, tiny_config):
        config = dataclasses.replace(tiny_config.scenegen, min_objects=6, max_objects=6,
                                     placement_radius=0.1, object_sizes=(0.5,))
        with pytest.raises(PlacementError):
            sample_scene(config, seed=0)


class TestAnalyticFields:
    def test_components_and_mask_labels(self, float64, tiny_config):
        spec = sample_scene(tiny_config.scenegen, seed=1)
        fields = AnalyticSceneFields(spec)
        assert fields.num_components == len(spec.objects) + 1
        record = render_dataset(spec, resolution=8, num_samples=16)
        assert record.images.shape == (tiny_config.scenegen.num_views, 3, 8, 8)
        assert record.masks.max() <= len(spec.objects)
        assert np.all((record.images >= 0) & (record.images <= 1))

    def test_thread_pool_matches_sequential(self, float64, tiny_config):
        strategy = ThreadPoolStrategy(2)
        try:
            threaded = generate_dataset(tiny_config.scenegen, seed=0, strategy=strategy, num_scenes=2)
        finally:
            strategy.shutdown()
        sequential = generate_dataset(tiny_config.scenegen, seed=0, num_scenes=2)
        for a, b in zip(threaded, sequential):
            np.testing.assert_array_equal(a.images, b.images)
            np.testing.assert_array_equal(a.masks, b.masks)


class TestDatasetFiles:
    """目录布局、回读与校验。"""

    def test_roundtrip(self, tiny_dataset, tiny_config):
        assert len(tiny_dataset) == tiny_config.scenegen.num_scenes
        assert tiny_dataset.resolution == tiny_config.scenegen.resolution
        assert tiny_dataset.manifest["generator_digest"] == tiny_config.dataset_digest()
        record = tiny_dataset[0]
        assert record.images.shape == (2, 3, 16, 16)
        assert record.masks.shape == (2, 16, 16)
        assert record.spec is not None
        # PNG 量化后的取值都是 k/255
        np.testing.assert_allclose(record.images * 255.0, np.round(record.images * 255.0), atol=1e-9)

    def test_rerender_matches_stored_images(self, float64, tiny_dataset, tiny_config):
        record = tiny_dataset[1]
        again = render_dataset(record.spec, record.views, num_samples=tiny_config.scenegen.render_samples,
                               sigma_max=tiny_config.scenegen.sigma_max, sharpness=tiny_config.scenegen.sharpness)
        assert psnr(again.images, record.images) >= 40.0
        np.testing.assert_array_equal(again.masks, record.masks)

    def test_missing_mask(self, dataset_copy):
        (dataset_copy / "scene_00000" / MASK_FILE_TEMPLATE.format(view=1)).unlink()
        with pytest.raises(DatasetValidationError, match="mask_1"):
            load_dataset(dataset_copy)
        assert len(load_dataset(dataset_copy, validate=False)) == 2

    def test_missing_manifest(self, dataset_copy):
        (dataset_copy / MANIFEST_FILE).unlink()
        with pytest.raises(DatasetValidationError):
            load_dataset(dataset_copy)

    def test_wrong_view_count(self, dataset_copy):
        with pytest.raises(DatasetValidationError):
            load_scene(dataset_copy / "scene_00000", num_views=3)

    def test_broken_cameras(self, dataset_copy):
        (dataset_copy / "scene_00001" / "cameras.json").write_text("[{\"focal\": 1}]", encoding="utf-8")
        with pytest.raises(DatasetValidationError):
            load_scene(dataset_copy / "scene_00001")
