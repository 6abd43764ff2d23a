# 条件辐射场：前景在观察者坐标系中查询（带局部性约束盒），背景在世界坐标系中查询

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .camera import CameraView
from .encoder import SlotSet
from .nets import LinearMap, Module, ModuleList, PositionalEncoder
from .tensor import ShapeError, Tensor, as_tensor, concat, relu, reshape, sigmoid

logger = logging.getLogger(__name__)


def world_to_viewer(points: np.ndarray, view: CameraView) -> np.ndarray:
    """世界坐标 -> 输入相机坐标系（相机到世界变换的逆）。"""
    points = np.asarray(points, dtype=np.float64)
    rotation, translation = view.rotation, view.position
    return (points - translation) @ rotation


def viewer_to_world(points: np.ndarray, view: CameraView) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ view.rotation.T + view.position


@dataclass
class LocalityBox:
    """观察者坐标系中的轴对齐盒：x, y ∈ [−B, B]，z ∈ [−far, −near]。"""
    half_extent: float
    near: float
    far: float
    active: bool = True

    def __post_init__(self):
        if not self.half_extent > 0 or not self.near < self.far:
            raise ValueError(f"局部性约束盒边界非法: B={self.half_extent}, near={self.near}, far={self.far}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([-self.half_extent, -self.half_extent, -self.far])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.half_extent, self.half_extent, -self.near])

    @classmethod
    def for_view(cls, view: CameraView, center_distance: float, coverage: float = 0.9, active: bool = True) -> "LocalityBox":
        """
        选取 B 使盒子在场景中心深度处的投影约覆盖 coverage 比例的像素。
        """
        if not 0 < coverage <= 1:
            raise ValueError(f"coverage 须在 (0, 1]，得到 {coverage}")
        side_pixels = math.sqrt(coverage * view.width * view.height)
        half_extent = side_pixels * center_distance / (2.0 * view.focal)
        return cls(half_extent=half_extent, near=view.near, far=view.far, active=active)

    def contains(self, viewer_points: np.ndarray) -> np.ndarray:
        p = np.asarray(viewer_points)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)

    def with_active(self, active: bool) -> "LocalityBox":
        return LocalityBox(self.half_extent, self.near, self.far, active)


@dataclass
class FieldQuery:
    """世界坐标下的采样点，以及定义观察者坐标系的输入视角。"""
    points_world: np.ndarray
    view: CameraView

    def __post_init__(self):
        self.points_world = np.asarray(self.points_world, dtype=np.float64)
        if self.points_world.shape[-1] != 3 or not np.all(np.isfinite(self.points_world)):
            raise ValueError(f"查询点须为有限的 [...,3] 数组，得到形状 {self.points_world.shape}")


@dataclass
class RadianceSampleBatch:
    """
    color: [(K+1), ..., 3] ∈ [0,1]；density: [(K+1), ...] ≥ 0；下标 0 是背景。
    """
    color: Tensor
    density: Tensor

    def __post_init__(self):
        if self.color.shape[:-1] != self.density.shape or self.color.shape[-1] != 3:
            raise ShapeError(f"颜色 {self.color.shape} 与密度 {self.density.shape} 形状不匹配")

    @property
    def num_components(self) -> int:
        return self.density.shape[0]


class RadianceDecoder(Module):
    """
    条件 MLP g(x | z)：输入 [γ(x), z]，在 skip_layer 层重新注入 [γ(x), z]，
    输出 σ = ReLU(·) 与 c = sigmoid(·)。不使用视线方向。
    """
    def __init__(self, encoding_dim: int, latent_dim: int, width: int, num_layers: int,
                 rng: np.random.Generator, skip_layer: Optional[int] = None):
        super().__init__()
        self.encoding_dim = encoding_dim
        self.latent_dim = latent_dim
        self.skip_layer = skip_layer if skip_layer is not None and 0 < skip_layer < num_layers else None
        layers = []
        for i in range(num_layers):
            if i == 0:
                in_dim = encoding_dim + latent_dim
            elif i == self.skip_layer:
                in_dim = width + encoding_dim + latent_dim
            else:
                in_dim = width
            layers.append(LinearMap(in_dim, width, rng, init="xavier"))
        self.layers = ModuleList(layers)
        self.density_head = LinearMap(width, 1, rng, init="xavier")
        self.color_head = LinearMap(width, 3, rng, init="xavier")

    def forward(self, encoded: Tensor, latents: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Args:
            encoded: [S, E]（所有槽共享的查询点）或 [K, S, E]（每个槽各自的点）
            latents: [K, D]
        Returns:
            color [K, S, 3], density [K, S]
        """
        encoded, latents = as_tensor(encoded), as_tensor(latents)
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise ShapeError(f"隐变量须为 [K, {self.latent_dim}]，得到 {latents.shape}")
        z = reshape(latents, (latents.shape[0], 1, self.latent_dim))
        h = None
        for i, layer in enumerate(self.layers):
            if i == 0:
                h = layer.apply_split([encoded, z])
            elif i == self.skip_layer:
                h = layer.apply_split([h, encoded, z])
            else:
                h = layer(h)
            h = relu(h)
        density = relu(self.density_head(h))
        color = sigmoid(self.color_head(h))
        return color, reshape(density, density.shape[:-1])


def decode_foreground(decoder: RadianceDecoder, encoder: PositionalEncoder, query: FieldQuery,
                      z: Tensor, box: Optional[LocalityBox], scene_scale: float = 1.0) -> Tuple[Tensor, Tensor]:
    """单个前景隐变量 z: [D] 在查询点上的 (color [S,3], density [S])。"""
    viewer = world_to_viewer(query.points_world.reshape(-1, 3), query.view)
    color, density = decoder(encoder(Tensor(viewer * scene_scale)), reshape(as_tensor(z), (1, -1)))
    if box is not None and box.active:
        density = density * Tensor(box.contains(viewer)[None].astype(np.float64))
    return color[0], density[0]


def decode_background(decoder: RadianceDecoder, encoder: PositionalEncoder, points_world: np.ndarray,
                      z: Tensor, scene_scale: float = 1.0) -> Tuple[Tensor, Tensor]:
    points = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    color, density = decoder(encoder(Tensor(points * scene_scale)), reshape(as_tensor(z), (1, -1)))
    return color[0], density[0]


class SceneFields(ABC):
    """可被渲染器查询的 K+1 分量场景（下标 0 为背景）。"""

    @property
    @abstractmethod
    def num_components(self) -> int:
        ...

    @abstractmethod
    def evaluate(self, points_world: np.ndarray) -> RadianceSampleBatch:
        """points_world: [R, S, 3] -> 每个分量在每个采样点上的颜色与密度。"""


class NeuralSceneFields(SceneFields):
    """
    由 SlotSet 与两个解码器组成的场景。编辑（平移/删除）在查询时实现：
    被平移 t 的槽在 x − t 处解码，约束盒随之平移；被删除的槽密度恒为 0。
    """
    def __init__(self,
                 fg_decoder: RadianceDecoder,
                 bg_decoder: RadianceDecoder,
                 encoder: PositionalEncoder,
                 slots: SlotSet,
                 input_view: CameraView,
                 box: Optional[LocalityBox] = None,
                 scene_scale: float = 1.0,
                 translations: Optional[np.ndarray] = None,
                 removed: Optional[np.ndarray] = None,
                 background_frame: str = "world"):
        if background_frame not in ("world", "viewer"):
            raise ValueError(f"未知的背景坐标系: {background_frame}")
        self.fg_decoder = fg_decoder
        self.bg_decoder = bg_decoder
        self.encoder = encoder
        self.slots = slots
        self.input_view = input_view
        self.box = box
        self.scene_scale = scene_scale
        k = slots.num_slots
        self.translations = np.zeros((k, 3)) if translations is None else np.asarray(translations, dtype=np.float64)
        self.removed = np.zeros(k, dtype=bool) if removed is None else np.asarray(removed, dtype=bool)
        if self.translations.shape != (k, 3) or self.removed.shape != (k,):
            raise ShapeError(f"平移 {self.translations.shape} / 删除标记 {self.removed.shape} 与槽数 {k} 不一致")
        self.background_frame = background_frame

    @property
    def num_components(self) -> int:
        return self.slots.num_slots + 1

    def _foreground_points(self, points: np.ndarray) -> np.ndarray:
        if np.all(self.translations == self.translations[:1]):
            # 所有槽共用一组查询点
            return world_to_viewer(points - self.translations[0], self.input_view)
        return np.stack([world_to_viewer(points - t, self.input_view) for t in self.translations], axis=0)

    def evaluate(self, points_world: np.ndarray) -> RadianceSampleBatch:
        points_world = np.asarray(points_world, dtype=np.float64)
        lead = points_world.shape[:-1]
        points = points_world.reshape(-1, 3)

        bg_points = points if self.background_frame == "world" else world_to_viewer(points, self.input_view)
        bg_color, bg_density = self.bg_decoder(self.encoder(Tensor(bg_points * self.scene_scale)), self.slots.background)

        viewer = self._foreground_points(points)
        fg_color, fg_density = self.fg_decoder(self.encoder(Tensor(viewer * self.scene_scale)), self.slots.foreground)
        keep = np.ones((self.slots.num_slots, points.shape[0]))
        if self.box is not None and self.box.active:
            keep = keep * self.box.contains(viewer)
        keep[self.removed] = 0.0
        if self.box is not None and self.box.active or self.removed.any():
            fg_density = fg_density * Tensor(keep)
        if fg_color.shape[1] != points.shape[0]:
            raise ShapeError(f"前景解码输出 {fg_color.shape} 与查询点数 {points.shape[0]} 不一致")

        color = concat([bg_color, fg_color], axis=0)
        density = concat([bg_density, fg_density], axis=0)
        n = self.num_components
        return RadianceSampleBatch(reshape(color, (n,) + lead + (3,)), reshape(density, (n,) + lead))
