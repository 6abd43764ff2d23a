# 随机数层级模块：所有随机性都从 (全局种子, 用途标签) 派生

import hashlib
import logging
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

SeedKey = Union[int, str]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)


def derive_seed(*keys: SeedKey) -> int:
    """
    把一组键（全局种子、用途标签、步数……）哈希成一个 64 位种子。
    同样的键永远得到同样的种子，与调用顺序无关。
    """
    text = "/".join(repr(k) for k in keys).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def generator(*keys: SeedKey) -> np.random.Generator:
    """按键派生一个独立的 numpy 随机数生成器。"""
    return np.random.default_rng(derive_seed(*keys))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # 数组上的 uint64 运算按 2^64 回绕
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX_1
    z = (z ^ (z >> np.uint64(27))) * _MIX_2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, step: int, pixel_ids: np.ndarray, num_samples: int) -> np.ndarray:
    """
    基于计数器的均匀随机数，形状 [R, num_samples]，取值 [0, 1)。

    每个像素的抖动只由 (seed, step, 像素编号, 采样序号) 决定，
    所以渲染一个图块与渲染整幅图后裁剪得到的抖动完全一致。
    """
    key = np.array([derive_seed(seed, "jitter", step)], dtype=np.uint64)
    pixels = np.asarray(pixel_ids, dtype=np.uint64).reshape(-1, 1)
    samples = np.arange(num_samples, dtype=np.uint64).reshape(1, -1)
    state = _splitmix64(key ^ _splitmix64(pixels * np.uint64(num_samples) + samples))
    return (state >> np.uint64(11)).astype(np.float64) * (1.0 / float(1 << 53))
