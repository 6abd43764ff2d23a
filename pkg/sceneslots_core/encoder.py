# 单图推断模块：U-net 特征提取 + 区分背景的槽注意力

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rng_lib
from .camera import CameraView
from .config_manager import ModelConfig
from .nets import Conv2dLayer, GruCell, LinearMap, Module, SlotMlp, xavier_uniform
from .tensor import (
    Parameter, ShapeError, Tensor, as_tensor, bilinear_resize, concat, exp, relu,
    reshape, softmax, swap_last, tsum,
)

logger = logging.getLogger(__name__)

NORMALIZER_EPS = 1e-12


def coordinate_channels(height: int, width: int) -> np.ndarray:
    """
    4 个坐标通道 (x, y, −x, −y)，x 沿宽度、y 沿高度线性归一化到 [−1, 1]。
    奇数尺寸时中心像素处四个通道都是 0。
    """
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    x = np.broadcast_to(xs[None, :], (height, width))
    y = np.broadcast_to(ys[:, None], (height, width))
    return np.stack([x, y, -x, -y], axis=0)


@dataclass
class FeatureMap:
    """展平后的卷积特征 feat: [N, D]，N = height·width。"""
    features: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.features.shape[0] != self.height * self.width:
            raise ShapeError(f"特征数 {self.features.shape[0]} 与空间尺寸 {self.height}x{self.width} 不一致")

    @property
    def count(self) -> int:
        return self.height * self.width

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SlotSet:
    """一个背景槽 [1, D] 加 K 个前景槽 [K, D]。"""
    background: Tensor
    foreground: Tensor

    def __post_init__(self):
        if self.background.ndim != 2 or self.background.shape[0] != 1:
            raise ShapeError(f"背景槽形状须为 [1, D]，得到 {self.background.shape}")
        if self.foreground.ndim != 2 or self.foreground.shape[1] != self.background.shape[1]:
            raise ShapeError(f"前景槽形状须为 [K, {self.background.shape[1]}]，得到 {self.foreground.shape}")

    @property
    def num_slots(self) -> int:
        return self.foreground.shape[0]

    @property
    def dim(self) -> int:
        return self.background.shape[1]

    def detach(self) -> "SlotSet":
        return SlotSet(self.background.detach(), self.foreground.detach())

    def with_background(self, background: Tensor) -> "SlotSet":
        return SlotSet(as_tensor(background), self.foreground)


class UNetEncoder(Module):
    """
    compact 变体：输出分辨率等于输入分辨率。
    stem 变体：先加一层 stride 1 的 Conv0，随后 Conv1 stride 2，输出为输入的一半。
    """
    INPUT_CHANNELS = 7

    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator, variant: str = "compact"):
        super().__init__()
        if variant not in ("compact", "stem"):
            raise ValueError(f"未知的编码器变体: {variant}")
        self.variant = variant
        first_in = self.INPUT_CHANNELS
        if variant == "stem":
            self.conv0 = Conv2dLayer(self.INPUT_CHANNELS, channels, rng, stride=1)
            first_in = channels
        self.conv1 = Conv2dLayer(first_in, channels, rng, stride=2 if variant == "stem" else 1)
        self.conv2 = Conv2dLayer(channels, channels, rng, stride=2)
        self.conv3 = Conv2dLayer(channels, channels, rng, stride=2)
        self.conv4 = Conv2dLayer(channels, channels, rng, stride=1)
        self.conv5 = Conv2dLayer(2 * channels, channels, rng, stride=1)
        self.conv6 = Conv2dLayer(2 * channels, out_channels, rng, stride=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.INPUT_CHANNELS:
            raise ShapeError(f"编码器输入须有 {self.INPUT_CHANNELS} 个通道，得到 {x.shape}")
        if self.variant == "stem":
            x = relu(self.conv0(x))
        skip1 = relu(self.conv1(x))
        skip2 = relu(self.conv2(skip1))
        h = relu(self.conv3(skip2))
        h = relu(self.conv4(h))
        h = bilinear_resize(h, skip2.shape[1], skip2.shape[2])
        h = relu(self.conv5(concat([h, skip2], axis=0)))
        h = bilinear_resize(h, skip1.shape[1], skip1.shape[2])
        return relu(self.conv6(concat([h, skip1], axis=0)))


class SlotPriors(Module):
    """背景与前景的对角高斯先验，尺度以 log σ 存储。"""
    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.mu_bg = Parameter(xavier_uniform(rng, (dim,), 1, dim))
        self.log_sigma_bg = Parameter(xavier_uniform(rng, (dim,), 1, dim))
        self.mu_fg = Parameter(xavier_uniform(rng, (dim,), 1, dim))
        self.log_sigma_fg = Parameter(xavier_uniform(rng, (dim,), 1, dim))

    def sample(self, num_slots: int, seed: int) -> SlotSet:
        """slot = μ + exp(log σ)·ε，ε 由种子决定；重参数化使先验参数可得梯度。"""
        generator = rng_lib.generator(seed, "slot-init")
        eps_bg = Tensor(generator.standard_normal((1, self.dim)))
        eps_fg = Tensor(generator.standard_normal((num_slots, self.dim)))
        background = self.mu_bg + exp(self.log_sigma_bg) * eps_bg
        foreground = self.mu_fg + exp(self.log_sigma_fg) * eps_fg
        return SlotSet(background, foreground)


def sample_slots(priors: SlotPriors, num_slots: int, seed: int) -> SlotSet:
    return priors.sample(num_slots, seed)


@dataclass
class AttentionTrace:
    """最后一次迭代的注意力（仅用于诊断）。"""
    attention: np.ndarray
    weights: np.ndarray


class BackgroundAwareSlotAttention(Module):
    """
    背景槽与前景槽共同竞争解释输入特征：softmax 沿槽轴（K+1 项），
    背景使用独立的 q/v 映射、GRU 与残差 MLP。
    """
    def __init__(self, dim: int, mlp_hidden: int, iterations: int, rng: np.random.Generator):
        super().__init__()
        if iterations < 1:
            raise ValueError(f"注意力迭代次数必须 >= 1，得到 {iterations}")
        self.dim = dim
        self.iterations = iterations
        self.to_k = LinearMap(dim, dim, rng, bias=False)
        self.to_q_bg = LinearMap(dim, dim, rng, bias=False)
        self.to_q_fg = LinearMap(dim, dim, rng, bias=False)
        self.to_v_bg = LinearMap(dim, dim, rng, bias=False)
        self.to_v_fg = LinearMap(dim, dim, rng, bias=False)
        self.gru_bg = GruCell(dim, rng)
        self.gru_fg = GruCell(dim, rng)
        self.mlp_bg = SlotMlp(dim, mlp_hidden, rng)
        self.mlp_fg = SlotMlp(dim, mlp_hidden, rng)
        self.last_trace: Optional[AttentionTrace] = None

    def forward(self, feat: FeatureMap, init: SlotSet) -> SlotSet:
        if feat.dim != self.dim or init.dim != self.dim:
            raise ShapeError(f"特征维度 {feat.dim} / 槽维度 {init.dim} 与注意力维度 {self.dim} 不一致")
        keys = self.to_k(feat.features)
        values_bg = self.to_v_bg(feat.features)
        values_fg = self.to_v_fg(feat.features)
        slot_bg, slots_fg = init.background, init.foreground
        scale = 1.0 / math.sqrt(self.dim)
        for _ in range(self.iterations):
            queries = concat([self.to_q_bg(slot_bg), self.to_q_fg(slots_fg)], axis=0)
            logits = (keys @ swap_last(queries)) * scale
            attention = softmax(logits, axis=1)
            weights = attention / (tsum(attention, axis=0, keepdims=True) + NORMALIZER_EPS)
            updates_bg = swap_last(weights[:, :1]) @ values_bg
            updates_fg = swap_last(weights[:, 1:]) @ values_fg
            slot_bg = self.mlp_bg(self.gru_bg(slot_bg, updates_bg))
            slots_fg = self.mlp_fg(self.gru_fg(slots_fg, updates_fg))
        self.last_trace = AttentionTrace(attention.data.copy(), weights.data.copy())
        return SlotSet(slot_bg, slots_fg)


def slot_attention(module: BackgroundAwareSlotAttention, feat: FeatureMap, init: SlotSet) -> SlotSet:
    return module(feat, init)


def max_slot_similarity(foreground: np.ndarray) -> float:
    """前景槽两两余弦相似度的最大值（少于两个槽时为 0）。"""
    slots = np.asarray(foreground, dtype=np.float64)
    if slots.shape[0] < 2:
        return 0.0
    norms = np.linalg.norm(slots, axis=1, keepdims=True)
    unit = slots / np.maximum(norms, 1e-12)
    similarity = unit @ unit.T
    upper = similarity[np.triu_indices(slots.shape[0], k=1)]
    return float(np.max(upper))


class SceneEncoder(Module):
    """图像 -> SlotSet：坐标通道、U-net、先验采样与槽注意力。"""
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.num_slots = config.num_slots
        self.resolution = config.encoder_resolution
        self.collapse_threshold = config.collapse_threshold
        self.unet = UNetEncoder(config.encoder_channels, config.slot_dim, rng, variant=config.encoder_variant)
        self.priors = SlotPriors(config.slot_dim, rng)
        self.attention = BackgroundAwareSlotAttention(config.slot_dim, config.mlp_hidden, config.attention_iters, rng)
        self.last_similarity = 0.0

    def extract_features(self, image: Tensor, camera: Optional[CameraView] = None) -> FeatureMap:
        """
        camera 为输入视角；坐标通道只依赖像素网格，特征与位姿无关，camera 仅为保持接口一致而接受。
        """
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"输入图像须为 [3,H,W]，得到 {image.shape}")
        if image.shape[1:] != (self.resolution, self.resolution):
            raise ShapeError(f"输入分辨率 {image.shape[1]}x{image.shape[2]} 与配置的 {self.resolution}x{self.resolution} 不一致")
        coords = Tensor(coordinate_channels(self.resolution, self.resolution))
        fmap = self.unet(concat([image, coords], axis=0))
        channels, height, width = fmap.shape
        features = swap_last(reshape(fmap, (channels, height * width)))
        return FeatureMap(features, height, width)

    def prepare_input(self, image: Tensor) -> Tensor:
        """把任意分辨率的输入图像缩放到编码器分辨率。"""
        return bilinear_resize(as_tensor(image), self.resolution, self.resolution)

    def forward(self, image: Tensor, seed: int) -> SlotSet:
        feat = self.extract_features(image)
        init = sample_slots(self.priors, self.num_slots, seed)
        slots = slot_attention(self.attention, feat, init)
        self.last_similarity = max_slot_similarity(slots.foreground.data)
        if self.last_similarity > self.collapse_threshold:
            logger.warning(f"检测到注意力秩塌缩：前景槽最大余弦相似度 {self.last_similarity:.6f} > {self.collapse_threshold}，可尝试更换种子")
        return slots

    @property
    def collapsed(self) -> bool:
        return self.last_similarity > self.collapse_threshold
