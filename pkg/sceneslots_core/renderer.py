# 体渲染模块：光线生成、分层采样、按密度加权合成与体渲染积分

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import rng as rng_lib
from .camera import CameraView
from .fields import RadianceSampleBatch, SceneFields
from .parallel import ExecutionStrategy, SequentialStrategy
from .tensor import (
    Tensor, concat, cumsum, exp, is_grad_enabled, no_grad, reshape, swap_last, tsum,
)

logger = logging.getLogger(__name__)

COMPOSE_EPS = 1e-12


@dataclass
class RayBatch:
    """origins/directions: [R,3]（方向为单位向量）；pixel_ids: 行优先的像素编号。"""
    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float
    pixel_ids: np.ndarray

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"需要 near < far，得到 {self.near}, {self.far}")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, index: slice) -> "RayBatch":
        return RayBatch(self.origins[index], self.directions[index], self.near, self.far, self.pixel_ids[index])


@dataclass
class SampleGrid:
    """depths: [R,S] 沿每条光线严格递增；deltas: 相邻采样间距，最后一项为 far − t_S。"""
    depths: np.ndarray
    deltas: np.ndarray


@dataclass
class RenderOutput:
    rgb: Tensor
    weights: Tensor
    opacity: Tensor
    depth: Tensor
    component_weights: Optional[Tensor] = None


def all_pixel_ids(view: CameraView) -> np.ndarray:
    return np.arange(view.height * view.width, dtype=np.int64)


def patch_pixel_ids(view: CameraView, top: int, left: int, size: int) -> np.ndarray:
    """以 (top, left) 为左上角、边长 size 的图块中的像素编号，行优先。"""
    if top < 0 or left < 0 or top + size > view.height or left + size > view.width:
        raise ValueError(f"图块 ({top},{left},{size}) 超出 {view.height}x{view.width} 的图像")
    rows, cols = np.meshgrid(np.arange(top, top + size), np.arange(left, left + size), indexing="ij")
    return (rows * view.width + cols).reshape(-1).astype(np.int64)


def generate_rays(view: CameraView, pixel_ids: Optional[np.ndarray] = None) -> RayBatch:
    """
    针孔模型：像素 (i, j) 中心的相机坐标方向为
    ((j + 0.5 − cx)/f, −(i + 0.5 − cy)/f, −1)，再旋转到世界坐标并归一化。
    """
    ids = all_pixel_ids(view) if pixel_ids is None else np.asarray(pixel_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= view.height * view.width):
        raise ValueError(f"像素编号超出 {view.height}x{view.width} 图像范围: [{ids.min()}, {ids.max()}]")
    rows, cols = np.divmod(ids, view.width)
    cam = np.stack([
        (cols + 0.5 - view.cx) / view.focal,
        -(rows + 0.5 - view.cy) / view.focal,
        -np.ones(ids.shape[0]),
    ], axis=-1)
    directions = cam @ view.rotation.T
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(view.position, directions.shape).copy()
    return RayBatch(origins, directions, view.near, view.far, ids)


def stratified_sample(rays: RayBatch, num_samples: int, seed: int = 0, step: int = 0, jitter: bool = False) -> SampleGrid:
    """把 [near, far] 等分为 S 段；每段取中点，或按 (种子, 步数, 像素) 决定的均匀数抖动。"""
    if num_samples < 1:
        raise ValueError(f"每条光线的采样数必须 >= 1，得到 {num_samples}")
    width = (rays.far - rays.near) / num_samples
    starts = rays.near + width * np.arange(num_samples)
    if jitter:
        u = rng_lib.counter_uniform(seed, step, rays.pixel_ids, num_samples)
    else:
        u = np.full((len(rays), num_samples), 0.5)
    depths = starts[None, :] + u * width
    deltas = np.empty_like(depths)
    deltas[:, :-1] = depths[:, 1:] - depths[:, :-1]
    deltas[:, -1] = rays.far - depths[:, -1]
    return SampleGrid(depths, deltas)


def sample_points(rays: RayBatch, grid: SampleGrid) -> np.ndarray:
    return rays.origins[:, None, :] + grid.depths[..., None] * rays.directions[:, None, :]


def compose(fields_out: RadianceSampleBatch) -> Tuple[Tensor, Tensor, Tensor]:
    """
    按密度加权平均合成：w_i = σ_i / Σ_j σ_j，σ̄ = Σ w_i σ_i，c̄ = Σ w_i c_i。
    Σσ = 0 时分母加 ε，结果为 σ̄ = 0、c̄ = 0。

    Returns:
        σ̄ [...], c̄ [..., 3], 各分量权重 w [(K+1), ...]
    """
    density, color = fields_out.density, fields_out.color
    if np.any(density.data < 0):
        raise ValueError(f"合成输入含负密度 (最小值 {float(density.data.min())})")
    total = tsum(density, axis=0, keepdims=True)
    guard = Tensor(np.where(total.data > 0, 0.0, COMPOSE_EPS), dtype=total.data.dtype)
    weights = density / (total + guard)
    sigma = tsum(weights * density, axis=0)
    rgb = tsum(reshape(weights, weights.shape + (1,)) * color, axis=0)
    return sigma, rgb, weights


def integrate(sigma: Tensor, color: Tensor, grid: SampleGrid) -> RenderOutput:
    """
    C = Σ_i T_i (1 − exp(−σ̄_i δ_i)) c̄_i，T_i = exp(−Σ_{j<i} σ̄_j δ_j)。
    同时返回每个采样点的权重、累计不透明度与期望深度。
    """
    optical = sigma * Tensor(grid.deltas)
    # 不含当前采样的前缀和
    exclusive = cumsum(optical, axis=-1) - optical
    transmittance = exp(-exclusive)
    weights = transmittance * (1.0 - exp(-optical))
    rgb = tsum(reshape(weights, weights.shape + (1,)) * color, axis=-2)
    opacity = tsum(weights, axis=-1)
    depth = tsum(weights * Tensor(grid.depths), axis=-1)
    return RenderOutput(rgb=rgb, weights=weights, opacity=opacity, depth=depth)


@dataclass
class SlotDensityMaps:
    """maps: [(K+1),h,w]，每个分量占像素累计不透明度的份额；labels: argmax，并列取最小下标。"""
    maps: np.ndarray
    labels: np.ndarray
    opacity: np.ndarray


class VolumeRenderer:
    """
    分块渲染器。记录计算图时分块顺序执行；在 no_grad 下按执行策略并行，
    结果按块顺序拼接，所以线程数不改变输出。
    """
    def __init__(self, strategy: Optional[ExecutionStrategy] = None, chunk_size: int = 4096, seed: int = 0):
        self.strategy = strategy or SequentialStrategy()
        self.chunk_size = chunk_size
        self.seed = seed

    def _render_chunk(self, fields: SceneFields, rays: RayBatch, num_samples: int, step: int, jitter: bool) -> RenderOutput:
        grid = stratified_sample(rays, num_samples, seed=self.seed, step=step, jitter=jitter)
        batch = fields.evaluate(sample_points(rays, grid))
        sigma, color, component_weights = compose(batch)
        out = integrate(sigma, color, grid)
        out.component_weights = component_weights
        return out

    def render_rays(self, fields: SceneFields, rays: RayBatch, num_samples: int, step: int = 0, jitter: bool = False) -> RenderOutput:
        chunks = [rays.subset(slice(i, i + self.chunk_size)) for i in range(0, len(rays), self.chunk_size)]

        def work(chunk: RayBatch) -> RenderOutput:
            return self._render_chunk(fields, chunk, num_samples, step, jitter)

        if is_grad_enabled() or len(chunks) == 1:
            outputs = [work(c) for c in chunks]
        else:
            outputs = self.strategy.map(work, chunks)
        if len(outputs) == 1:
            return outputs[0]
        return RenderOutput(
            rgb=concat([o.rgb for o in outputs], axis=0),
            weights=concat([o.weights for o in outputs], axis=0),
            opacity=concat([o.opacity for o in outputs], axis=0),
            depth=concat([o.depth for o in outputs], axis=0),
            component_weights=concat([o.component_weights for o in outputs], axis=1),
        )

    def render_image(self, fields: SceneFields, view: CameraView, num_samples: int, step: int = 0, jitter: bool = False) -> Tensor:
        """整幅图像 [3, h, w]。"""
        out = self.render_rays(fields, generate_rays(view), num_samples, step, jitter)
        return reshape(swap_last(out.rgb), (3, view.height, view.width))

    def render_patch(self, fields: SceneFields, view: CameraView, top: int, left: int, size: int,
                     num_samples: int, step: int = 0, jitter: bool = False) -> Tensor:
        """图块 [3, size, size]；与整幅渲染后裁剪的结果一致。"""
        rays = generate_rays(view, patch_pixel_ids(view, top, left, size))
        out = self.render_rays(fields, rays, num_samples, step, jitter)
        return reshape(swap_last(out.rgb), (3, size, size))

    def render_maps(self, fields: SceneFields, view: CameraView, num_samples: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """不记录计算图，返回 (rgb [3,h,w], depth [h,w], opacity [h,w])。"""
        with no_grad():
            out = self.render_rays(fields, generate_rays(view), num_samples)
        h, w = view.height, view.width
        return out.rgb.data.T.reshape(3, h, w), out.depth.data.reshape(h, w), out.opacity.data.reshape(h, w)

    def render_slot_density_maps(self, fields: SceneFields, view: CameraView, num_samples: int) -> SlotDensityMaps:
        """
        d^i_p = Σ_s T_s (1 − exp(−σ̄_s δ_s)) · w_{i,s}；
        标签为各分量 d^i 的 argmax，0 为背景。
        """
        with no_grad():
            out = self.render_rays(fields, generate_rays(view), num_samples)
        per_sample = out.weights.data[None] * out.component_weights.data
        maps = per_sample.sum(axis=-1).reshape(-1, view.height, view.width)
        labels = np.argmax(maps, axis=0).astype(np.int64)
        return SlotDensityMaps(maps=maps, labels=labels, opacity=out.opacity.data.reshape(view.height, view.width))
