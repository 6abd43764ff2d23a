"""
评估指标的测试：ARI 的已知值与性质、PSNR / SSIM 的常数，以及用解析场跑通的评估流程。
"""

import dataclasses
import itertools
import math

import numpy as np
import pytest
from scipy.special import comb

from sceneslots_core.evaluator import (
    METRICS, LabelImage, OracleFieldsProvider, SceneEvaluator, ari, eval_run, psnr, rfpd, ssim,
)
from sceneslots_core.losses import FeatureExtractor


def brute_force_ari(truth: np.ndarray, pred: np.ndarray) -> float:
    """由列联表直接计算的调整兰德指数。"""
    t, p = truth.reshape(-1), pred.reshape(-1)
    table = np.array([[np.sum((t == a) & (p == b)) for b in np.unique(p)] for a in np.unique(t)])
    index = comb(table, 2).sum()
    rows, cols = comb(table.sum(axis=1), 2).sum(), comb(table.sum(axis=0), 2).sum()
    expected = rows * cols / comb(t.size, 2)
    maximum = (rows + cols) / 2.0
    return float((index - expected) / (maximum - expected))


# =============================================================================
# ARI
# =============================================================================

class TestAri:
    """调整兰德指数。"""

    def test_worked_example(self):
        assert ari(np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])) == pytest.approx(-0.5)

    def test_identical_partitions(self, rng):
        labels = rng.integers(0, 4, size=(6, 6))
        assert ari(labels, labels) == pytest.approx(1.0)

    def test_label_permutation_invariance(self, rng):
        truth = rng.integers(0, 3, size=(5, 5))
        pred = rng.integers(0, 4, size=(5, 5))
        base = ari(truth, pred)
        for perm in itertools.permutations(range(4)):
            assert ari(truth, np.asarray(perm)[pred]) == pytest.approx(base)

    def test_matches_contingency_formula(self, rng):
        for _ in range(5):
            truth = rng.integers(0, 3, size=40)
            pred = rng.integers(0, 5, size=40)
            assert ari(truth, pred) == pytest.approx(brute_force_ari(truth, pred))

    def test_single_cluster_convention(self):
        assert ari(np.zeros(6, dtype=int), np.zeros(6, dtype=int)) == 1.0

    def test_mask_selects_pixels(self):
        truth = np.array([[0, 0], [1, 2]])
        pred = np.array([[3, 4], [1, 2]])
        assert ari(truth, pred) < 1.0
        assert ari(truth, pred, mask=truth > 0) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            ari(truth, pred, mask=np.zeros((2, 2), dtype=bool))

    def test_random_predictor_near_zero(self, rng):
        truth = np.zeros((64, 64), dtype=int)
        truth[10:30, 10:30] = 1
        truth[40:60, 5:25] = 2
        pred = rng.integers(0, 5, size=(64, 64))
        assert abs(ari(truth, pred)) < 0.05

    def test_label_image_wrapper(self):
        with pytest.raises(ValueError):
            LabelImage(np.zeros((2, 2)))
        image = LabelImage(np.array([[0, 1], [1, 0]]), provenance="predicted")
        assert ari(image, image.labels) == pytest.approx(1.0)


# =============================================================================
# 图像质量
# =============================================================================

class TestImageMetrics:
    def test_psnr_constants(self):
        a = np.zeros((3, 4, 4))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a + 0.01) == pytest.approx(40.0)
        assert psnr(a, a) == math.inf

    def test_ssim_identity_and_inversion(self, rng):
        a = rng.random((3, 16, 16))
        assert ssim(a, a) == pytest.approx(1.0)
        assert ssim(a, 1.0 - a) < 1.0

    def test_ssim_requires_full_window(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

    def test_rfpd(self, float64, rng):
        extractor = FeatureExtractor(channels=(2, 2, 2), seed=1)
        a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        assert rfpd(a, a, extractor) == 0.0
        assert rfpd(a, b, extractor) > 0.0


# =============================================================================
# 评估流程
# =============================================================================

class TestOracleEvaluation:
    """解析场作为解码器、采样数与生成时相同：分割与真值完全一致。"""

    @pytest.fixture
    def evaluator(self, tiny_config):
        return SceneEvaluator(OracleFieldsProvider(tiny_config.scenegen.sigma_max, tiny_config.scenegen.sharpness),
                              dataclasses.replace(tiny_config.eval, samples=tiny_config.scenegen.render_samples),
                              extractor=FeatureExtractor(channels=(2, 2, 2)))

    def test_scene_row(self, float64, evaluator, tiny_dataset):
        row = evaluator.evaluate_scene(tiny_dataset[0], seed=0)
        assert row["ari"] == pytest.approx(1.0)
        assert row["nv_ari"] == pytest.approx(1.0)
        assert row["psnr"] > 40.0
        assert row["ssim"] > 0.9
        assert not row["collapsed"]
        assert row["random_ari"] < row["ari"]

    def test_eval_run_report(self, float64, evaluator, tiny_dataset):
        report = eval_run(evaluator, tiny_dataset, seeds=[0, 1])
        assert report["num_scenes"] == 2
        assert report["seeds"] == [0, 1]
        assert len(report["per_scene"]) == 4
        assert set(report["aggregate"]) == set(METRICS)
        assert report["collapsed"] == 0
        # 解析场与种子无关
        assert report["aggregate"]["ari"]["std"] == pytest.approx(0.0)

    def test_max_scenes(self, float64, evaluator, tiny_dataset):
        assert eval_run(evaluator, tiny_dataset, seeds=[0], max_scenes=1)["num_scenes"] == 1
