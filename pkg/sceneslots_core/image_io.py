# sceneslots_core/image_io.py
# PNG 读写：8 位 RGB 图像与单通道标签图

import logging
from pathlib import Path
from typing import Union

import imageio.v2 as imageio
import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def quantize(image: np.ndarray) -> np.ndarray:
    """[3,h,w] 或 [h,w,3] 的 [0,1] 浮点图 -> [h,w,3] uint8，取 floor(clip(x)·255 + 0.5)。"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[-1] != 3:
        image = np.transpose(image, (1, 2, 0))
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"RGB 图像须为 [3,h,w] 或 [h,w,3]，得到 {image.shape}")
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_rgb(path: PathLike, image: np.ndarray) -> None:
    imageio.imwrite(str(path), quantize(image))


def read_rgb(path: PathLike) -> np.ndarray:
    """返回 [3,h,w] float64，取值 k/255。"""
    data = np.asarray(imageio.imread(str(path)))
    if data.ndim == 2:
        data = np.stack([data] * 3, axis=-1)
    if data.ndim != 3 or data.shape[-1] not in (3, 4):
        raise ValueError(f"{path} 不是 RGB 图像 (形状 {data.shape})")
    return np.transpose(data[..., :3].astype(np.float64) / 255.0, (2, 0, 1))


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"标签图须为二维，得到 {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError(f"标签取值须在 [0, 255]，得到 [{labels.min()}, {labels.max()}]")
    imageio.imwrite(str(path), labels.astype(np.uint8))


def read_labels(path: PathLike) -> np.ndarray:
    data = np.asarray(imageio.imread(str(path)))
    if data.ndim == 3:
        data = data[..., 0]
    return data.astype(np.int64)


def write_gray(path: PathLike, values: np.ndarray, scale: float = None) -> None:
    """深度/不透明度/密度图按最大值（或给定 scale）归一化后写成 8 位灰度图。"""
    values = np.asarray(values, dtype=np.float64)
    top = scale if scale is not None else float(values.max()) if values.size else 0.0
    normalized = values / top if top > 0 else np.zeros_like(values)
    imageio.imwrite(str(path), np.floor(np.clip(normalized, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
