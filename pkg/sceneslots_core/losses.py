# 训练目标：重建损失、感知损失、非饱和对抗损失与 R1 正则，以及判别器

import contextlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np

from . import rng as rng_lib
from .nets import Conv2dLayer, LinearMap, Module, ModuleList
from .tensor import (
    ShapeError, Tensor, as_tensor, grad, is_grad_enabled, leaky_relu, mean, no_grad,
    relu, reshape, softplus, stack, tsum,
)

logger = logging.getLogger(__name__)


class NestedGradientError(RuntimeError):
    """R1 正则需要对梯度再求导，但当前处于不记录计算图的上下文。"""


@dataclass
class LossWeights:
    percept: float = 0.006
    adv: float = 0.01
    r1: float = 10.0


# --- 特征提取器 ---

class FeatureExtractor(Module):
    """
    冻结的卷积金字塔：3 个 stride 2 的卷积块，权重由固定种子随机初始化并随模型保存；
    也可以通过 load_weights 载入外部权重（同一检查点格式）。
    """
    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = 0):
        super().__init__()
        generator = rng_lib.generator(seed, "feature-extractor")
        blocks, c_in = [], 3
        for c_out in channels:
            blocks.append(Conv2dLayer(c_in, c_out, generator, stride=2))
            c_in = c_out
        self.blocks = ModuleList(blocks)
        self.requires_grad_(False)

    def forward(self, image: Tensor) -> List[Tensor]:
        levels, h = [], as_tensor(image)
        for block in self.blocks:
            h = relu(block(h))
            levels.append(h)
        return levels

    def load_weights(self, path: Union[str, Path]) -> None:
        from .checkpoint import read_checkpoint
        checkpoint = read_checkpoint(path, expected_digest=None)
        state = {name[len("extractor/"):]: value for name, value in checkpoint.entries.items()
                 if name.startswith("extractor/")}
        if not state:
            state = checkpoint.parameters()
        self.load_state_dict(state)
        self.requires_grad_(False)
        logger.info(f"特征提取器已从 {path} 载入 {len(state)} 个权重张量")


# --- 判别器 ---

class Discriminator(Module):
    """4 个 stride 2 卷积块 (32→64→128→128)，LeakyReLU(0.2)，展平后线性输出 1 个 logit。"""
    def __init__(self, resolution: int, rng: np.random.Generator, channels: Sequence[int] = (32, 64, 128, 128)):
        super().__init__()
        self.resolution = resolution
        blocks, c_in, size = [], 3, resolution
        for c_out in channels:
            blocks.append(Conv2dLayer(c_in, c_out, rng, stride=2))
            c_in = c_out
            size = -(-size // 2)
        self.blocks = ModuleList(blocks)
        self.flat_dim = c_in * size * size
        self.head = LinearMap(self.flat_dim, 1, rng)

    def forward(self, images: Sequence[Tensor]) -> Tensor:
        """images: 若干 [3,H,W] 图像 -> 每张图一个 logit，形状 [B]。"""
        logits = []
        for image in images:
            image = as_tensor(image)
            if image.shape != (3, self.resolution, self.resolution):
                raise ShapeError(f"判别器期望 [3,{self.resolution},{self.resolution}] 的输入，得到 {image.shape}")
            h = image
            for block in self.blocks:
                h = leaky_relu(block(h), 0.2)
            logits.append(reshape(self.head(reshape(h, (1, self.flat_dim))), (1,)))
        return stack(logits, axis=0).reshape(len(logits))


@contextlib.contextmanager
def frozen(module: Module) -> Iterator[Module]:
    """临时关闭模块参数的 requires_grad，使其不进入计算图。"""
    flags = [(p, p.requires_grad) for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad = flag


# --- 损失项 ---

def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"渲染图 {a.shape} 与参考图 {b.shape} 形状不一致")


def recon_loss(render: Tensor, reference: Tensor) -> Tensor:
    """均方误差（对像素与通道取平均）。"""
    render, reference = as_tensor(render), as_tensor(reference)
    _check_same_shape(render, reference)
    diff = render - reference
    return mean(diff * diff)


def perceptual_loss(render: Tensor, reference: Tensor, extractor: FeatureExtractor) -> Tensor:
    """各层特征均方误差的平均；参考图的特征不参与求导。"""
    render, reference = as_tensor(render), as_tensor(reference)
    _check_same_shape(render, reference)
    with no_grad():
        targets = [t.detach() for t in extractor(reference.detach())]
    levels = extractor(render)
    total = None
    for feature, target in zip(levels, targets):
        diff = feature - target
        term = mean(diff * diff)
        total = term if total is None else total + term
    return total / float(len(levels))


def adv_f(t) -> Tensor:
    """f(t) = −log(1 + exp(−t))，以 softplus 形式计算，|t| 到 1e4 都稳定。"""
    return -softplus(-as_tensor(t))


@dataclass
class DiscriminatorLoss:
    total: Tensor
    fake_term: Tensor
    real_term: Tensor
    r1: Tensor


def discriminator_loss(disc: Discriminator, real: Sequence[Tensor], fake: Sequence[Tensor],
                       lambda_r1: float = 10.0, r1_scale: float = 1.0) -> DiscriminatorLoss:
    """
    L_D = mean f(D(fake)) + mean f(−D(real)) + λ_R·r1_scale·mean ‖∇_I D(real)‖²。
    r1_scale = 0 时跳过梯度惩罚（惰性 R1 的非正则步）。
    """
    if not is_grad_enabled():
        raise NestedGradientError("R1 梯度惩罚需要二阶求导，不能在 no_grad 上下文中计算判别器损失；请在记录计算图时调用")
    fake_inputs = [as_tensor(f).detach() for f in fake]
    real_inputs = [Tensor(as_tensor(r).data, requires_grad=True) for r in real]
    fake_logits = disc(fake_inputs)
    real_logits = disc(real_inputs)
    fake_term = mean(adv_f(fake_logits))
    real_term = mean(adv_f(-real_logits))
    if r1_scale > 0 and lambda_r1 > 0:
        gradients = grad(tsum(real_logits), real_inputs, create_graph=True)
        norms = [tsum(g * g) for g in gradients]
        r1 = mean(stack(norms, axis=0))
    else:
        r1 = Tensor(0.0)
    total = fake_term + real_term + r1 * float(lambda_r1 * r1_scale)
    return DiscriminatorLoss(total=total, fake_term=fake_term, real_term=real_term, r1=r1)


def generator_adversarial_term(disc: Discriminator, fake: Sequence[Tensor]) -> Tensor:
    """L_G = −mean f(D(fake))；判别器参数被冻结，梯度只流向生成图像。"""
    with frozen(disc):
        logits = disc(list(fake))
        return -mean(adv_f(logits))


def discriminator_losses(disc: Discriminator, real: Sequence[Tensor], fake: Sequence[Tensor],
                         lambda_r1: float = 10.0):
    """返回 (L_D, L_G_term)。"""
    return discriminator_loss(disc, real, fake, lambda_r1).total, generator_adversarial_term(disc, fake)


@dataclass
class LossParts:
    recon: Tensor
    percept: Optional[Tensor] = None
    adv: Optional[Tensor] = None

    def as_floats(self) -> dict:
        return {name: float(value.item()) for name, value in
                (("recon", self.recon), ("percept", self.percept), ("adv", self.adv)) if value is not None}


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """L = L_recon + λ_percept·L_percept + λ_adv·L_G_term。"""
    loss = parts.recon
    if parts.percept is not None and weights.percept != 0:
        loss = loss + parts.percept * float(weights.percept)
    if parts.adv is not None and weights.adv != 0:
        loss = loss + parts.adv * float(weights.adv)
    return loss
