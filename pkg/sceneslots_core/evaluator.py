# sceneslots_core/evaluator.py
# 定量评估：ARI 系列分割指标与新视角合成的 PSNR / SSIM / RFPD

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.metrics import adjusted_rand_score

from . import rng as rng_lib
from .camera import CameraView
from .config_manager import EvalConfig
from .encoder import max_slot_similarity
from .fields import SceneFields
from .losses import FeatureExtractor, perceptual_loss
from .parallel import ExecutionStrategy, SequentialStrategy
from .renderer import VolumeRenderer
from .scene_model import SceneModel
from .scenegen import AnalyticSceneFields, SceneDataset, SceneRecord
from .tensor import Tensor, bilinear_resize, no_grad

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

METRICS = ("ari", "nv_ari", "fg_ari", "random_ari", "psnr", "ssim", "rfpd")


@dataclass
class LabelImage:
    """逐像素整数标签；provenance 为 truth 或 predicted。"""
    labels: np.ndarray
    provenance: str = "truth"
    view: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"标签图须为整数类型，得到 {self.labels.dtype}")


def _labels(value) -> np.ndarray:
    return value.labels if isinstance(value, LabelImage) else np.asarray(value)


def ari(truth, pred, mask: Optional[np.ndarray] = None) -> float:
    """
    调整兰德指数；mask 给出时只统计被选中的像素。
    两个划分都只有一个簇时定义为 1。
    """
    t, p = _labels(truth), _labels(pred)
    if t.shape != p.shape:
        raise ValueError(f"标签图形状不一致: {t.shape} 与 {p.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != t.shape:
            raise ValueError(f"mask 形状 {mask.shape} 与标签图 {t.shape} 不一致")
        t, p = t[mask], p[mask]
    t, p = t.reshape(-1), p.reshape(-1)
    if t.size == 0:
        raise ValueError("ARI 的像素选择为空")
    return float(adjusted_rand_score(t, p))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10·log10(1/MSE)；MSE = 0 时返回 +inf。"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"图像形状不一致: {a.shape} 与 {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image.mean(axis=0)
    return image


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    灰度（通道平均）上的窗口 SSIM：11×11 高斯窗、σ = 1.5，
    只取完整落在图像内的窗口求平均。
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"图像形状不一致: {a.shape} 与 {b.shape}")
    x, y = _gray(a), _gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"图像 {x.shape} 小于 SSIM 窗口 {SSIM_WINDOW}x{SSIM_WINDOW}")
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA

    def blur(z: np.ndarray) -> np.ndarray:
        return gaussian_filter(z, sigma=SSIM_SIGMA, truncate=truncate, mode="constant")

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(y * y) - mu_y ** 2
    cov = blur(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    denominator = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    r = SSIM_WINDOW // 2
    valid = (numerator / denominator)[r:x.shape[0] - r, r:x.shape[1] - r]
    return float(valid.mean())


def rfpd(a: np.ndarray, b: np.ndarray, extractor: FeatureExtractor) -> float:
    """随机特征感知距离：冻结的随机卷积金字塔上的多层特征均方误差。"""
    with no_grad():
        return float(perceptual_loss(Tensor(a), Tensor(b), extractor).item())


# --- 场景场提供者 ---

class FieldsProvider(ABC):
    """为一个场景与种子给出可渲染的场景场。"""

    @abstractmethod
    def fields_for(self, record: SceneRecord, seed: int) -> Tuple[SceneFields, float]:
        """返回 (场景场, 前景槽最大余弦相似度)。"""


class ModelFieldsProvider(FieldsProvider):
    def __init__(self, model: SceneModel, input_view: int = 0):
        self.model = model
        self.input_view = input_view

    def fields_for(self, record: SceneRecord, seed: int) -> Tuple[SceneFields, float]:
        with no_grad():
            slots = self.model.encode(Tensor(record.images[self.input_view]), seed)
        similarity = max_slot_similarity(slots.foreground.data)
        return self.model.scene_fields(slots, record.views[self.input_view]), similarity


class OracleFieldsProvider(FieldsProvider):
    """以数据集的解析场作为解码器，验证渲染-分割流程本身。"""
    def __init__(self, sigma_max: float = 60.0, sharpness: float = 20.0):
        self.sigma_max = sigma_max
        self.sharpness = sharpness

    def fields_for(self, record: SceneRecord, seed: int) -> Tuple[SceneFields, float]:
        if record.spec is None:
            raise ValueError(f"场景 {record.name} 没有 scene.json，无法构造解析场")
        return AnalyticSceneFields(record.spec, self.sigma_max, self.sharpness), 0.0


# --- 评估 ---

def _nearest_resize(labels: np.ndarray, size: int) -> np.ndarray:
    h, w = labels.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return labels[np.ix_(rows, cols)]


def _bilinear_resize_image(image: np.ndarray, size: int) -> np.ndarray:
    return bilinear_resize(Tensor(image), size, size).data.astype(np.float64)


class SceneEvaluator:
    def __init__(self, provider: FieldsProvider, config: EvalConfig, extractor: Optional[FeatureExtractor] = None,
                 renderer: Optional[VolumeRenderer] = None, collapse_threshold: float = 0.999):
        self.provider = provider
        self.config = config
        self.extractor = extractor or FeatureExtractor()
        self.renderer = renderer or VolumeRenderer()
        self.collapse_threshold = collapse_threshold

    def _view(self, view: CameraView) -> CameraView:
        size = self.config.resolution
        return view.scaled(size, size) if size > 0 else view

    def evaluate_scene(self, record: SceneRecord, seed: int, index: int = 0) -> Dict[str, Any]:
        """输入视角的 ARI / Fg-ARI / 随机基线，其余视角的 NV-ARI 与图像质量指标。"""
        scene, similarity = self.provider.fields_for(record, seed)
        input_view = self.config.input_view
        row: Dict[str, Any] = {"scene": record.name, "seed": seed, "slot_similarity": similarity,
                               "collapsed": bool(similarity > self.collapse_threshold)}
        nv_ari, psnrs, ssims, rfpds = [], [], [], []
        for v, view in enumerate(record.views):
            view = self._view(view)
            maps = self.renderer.render_slot_density_maps(scene, view, self.config.samples)
            truth = record.masks[v]
            reference = record.images[v]
            if truth.shape != maps.labels.shape:
                truth = _nearest_resize(truth, view.height)
                reference = _bilinear_resize_image(reference, view.height)
            if v == input_view:
                row["ari"] = ari(truth, maps.labels)
                foreground = truth > 0
                row["fg_ari"] = ari(truth, maps.labels, foreground) if foreground.any() else None
                generator = rng_lib.generator(seed, "random-baseline", index)
                random_labels = generator.integers(0, scene.num_components, size=truth.shape)
                row["random_ari"] = ari(truth, random_labels)
                continue
            nv_ari.append(ari(truth, maps.labels))
            rgb, _, _ = self.renderer.render_maps(scene, view, self.config.samples)
            psnrs.append(psnr(rgb, reference))
            if min(rgb.shape[1:]) >= SSIM_WINDOW:
                ssims.append(ssim(rgb, reference))
            rfpds.append(rfpd(rgb, reference, self.extractor))
        row["nv_ari"] = float(np.mean(nv_ari)) if nv_ari else None
        row["psnr"] = float(np.mean(psnrs)) if psnrs else None
        row["ssim"] = float(np.mean(ssims)) if ssims else None
        row["rfpd"] = float(np.mean(rfpds)) if rfpds else None
        return row


def _mean_of(rows: Sequence[Dict[str, Any]], key: str) -> Optional[float]:
    values = [r[key] for r in rows if r.get(key) is not None and np.isfinite(r[key])]
    return float(np.mean(values)) if values else None


def eval_run(evaluator: SceneEvaluator, dataset: SceneDataset, seeds: Sequence[int],
             strategy: Optional[ExecutionStrategy] = None, max_scenes: int = 0) -> Dict[str, Any]:
    """
    对每个种子评估所有场景，先按种子取场景平均，再报告种子间的均值 ± 标准差。
    """
    strategy = strategy or SequentialStrategy()
    count = len(dataset) if max_scenes <= 0 else min(max_scenes, len(dataset))
    rows: List[Dict[str, Any]] = []
    per_seed: Dict[str, Dict[str, Optional[float]]] = {}
    for seed in seeds:
        def work(index: int) -> Dict[str, Any]:
            return evaluator.evaluate_scene(dataset[index], rng_lib.derive_seed(seed, "eval", index), index)

        with no_grad():
            seed_rows = strategy.map(work, list(range(count)))
        for row in seed_rows:
            row["run_seed"] = seed
        rows.extend(seed_rows)
        per_seed[str(seed)] = {key: _mean_of(seed_rows, key) for key in METRICS}
        logger.info(f"种子 {seed}: ARI={per_seed[str(seed)]['ari']}, NV-ARI={per_seed[str(seed)]['nv_ari']}, "
                    f"Fg-ARI={per_seed[str(seed)]['fg_ari']}")

    aggregate = {}
    for key in METRICS:
        values = [m[key] for m in per_seed.values() if m[key] is not None]
        aggregate[key] = {"mean": float(np.mean(values)) if values else None,
                          "std": float(np.std(values)) if values else None}
    collapsed = sum(1 for r in rows if r["collapsed"])
    if collapsed:
        logger.warning(f"{collapsed} 个场景-种子组合出现注意力秩塌缩")
    return {
        "num_scenes": count,
        "seeds": list(seeds),
        "per_scene": rows,
        "per_seed": per_seed,
        "aggregate": aggregate,
        "collapsed": collapsed,
    }
