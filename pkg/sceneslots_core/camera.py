# 针孔相机与位姿工具
#
# 约定：右手系，相机在自身坐标系中朝 −z 看，+y 朝上。

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-6


def check_rigid(cam_to_world: np.ndarray, tolerance: float = ORTHONORMAL_TOLERANCE) -> None:
    """检查 4x4 位姿是刚体变换，否则抛出 ValueError。"""
    matrix = np.asarray(cam_to_world, dtype=np.float64)
    if matrix.shape != (4, 4):
        raise ValueError(f"位姿矩阵须为 4x4，得到 {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("位姿矩阵含有非有限值")
    if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], atol=tolerance):
        raise ValueError(f"位姿矩阵最后一行须为 [0,0,0,1]，得到 {matrix[3].tolist()}")
    rotation = matrix[:3, :3]
    error = float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))
    if error > tolerance or np.linalg.det(rotation) <= 0:
        raise ValueError(f"旋转块不是正交矩阵 (偏差 {error:.3e})，位姿不可作为刚体变换求逆")


@dataclass(eq=False)
class CameraView:
    """内参加相机到世界的位姿；定义光线与观察者坐标系。"""
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray
    near: float
    far: float
    _world_to_cam: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"焦距必须为正，得到 {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"图像尺寸必须为正，得到 {self.width}x{self.height}")
        if not 0 <= self.near < self.far:
            raise ValueError(f"需要 0 <= near < far，得到 near={self.near}, far={self.far}")
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        check_rigid(self.cam_to_world)
        rotation = self.cam_to_world[:3, :3]
        inverse = np.eye(4)
        inverse[:3, :3] = rotation.T
        inverse[:3, 3] = -rotation.T @ self.cam_to_world[:3, 3]
        self._world_to_cam = inverse

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def world_to_cam(self) -> np.ndarray:
        return self._world_to_cam

    def scaled(self, height: int, width: int) -> "CameraView":
        """同一位姿在另一分辨率下的相机（内参按比例缩放）。"""
        sx, sy = width / self.width, height / self.height
        return CameraView(
            focal=self.focal * sx, cx=self.cx * sx, cy=self.cy * sy, width=width, height=height,
            cam_to_world=self.cam_to_world.copy(), near=self.near, far=self.far,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "focal": float(self.focal),
            "principal_point": [float(self.cx), float(self.cy)],
            "width": int(self.width),
            "height": int(self.height),
            "cam_to_world": self.cam_to_world.tolist(),
            "near": float(self.near),
            "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraView":
        cx, cy = data["principal_point"]
        return cls(
            focal=float(data["focal"]), cx=float(cx), cy=float(cy),
            width=int(data["width"]), height=int(data["height"]),
            cam_to_world=np.array(data["cam_to_world"], dtype=np.float64),
            near=float(data["near"]), far=float(data["far"]),
        )

    @classmethod
    def identity(cls, width: int, height: int, focal: float, near: float, far: float) -> "CameraView":
        return cls(focal=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
                   cam_to_world=np.eye(4), near=near, far=far)


def look_at(eye: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0), up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """构造从 eye 看向 target 的相机到世界矩阵（世界坐标 +z 朝上）。"""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye 与 target 重合，无法确定朝向")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise ValueError("视线方向与 up 平行，无法确定朝向")
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


def ring_pose(radius: float, elevation: float, azimuth: float, target: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """相机环上的位姿：给定半径、仰角与方位角（弧度），看向场景中心。"""
    eye = np.array([
        radius * math.cos(elevation) * math.cos(azimuth),
        radius * math.cos(elevation) * math.sin(azimuth),
        radius * math.sin(elevation),
    ]) + np.asarray(target, dtype=np.float64)
    return look_at(eye, target)


def orbit_views(template: CameraView, radius: float, elevation: float, count: int, start_azimuth: float = 0.0) -> List[CameraView]:
    """在同一相机环上均匀取 count 个方位角。"""
    if count < 1:
        raise ValueError(f"环绕视角数量必须 >= 1，得到 {count}")
    views = []
    for i in range(count):
        azimuth = start_azimuth + 2.0 * math.pi * i / count
        views.append(CameraView(
            focal=template.focal, cx=template.cx, cy=template.cy,
            width=template.width, height=template.height,
            cam_to_world=ring_pose(radius, elevation, azimuth),
            near=template.near, far=template.far,
        ))
    logger.debug(f"生成 {count} 个环绕视角 (半径 {radius}, 仰角 {elevation:.3f})")
    return views
