# sceneslots_core/scenegen.py
# 程序化多视角数据集：解析的物体/房间密度场，经同一渲染器渲染出图像、位姿与实例掩码

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from . import image_io
from . import rng as rng_lib
from .camera import CameraView, ring_pose
from .config_manager import SceneGenConfig
from .fields import RadianceSampleBatch, SceneFields
from .parallel import ExecutionStrategy, SequentialStrategy
from .renderer import VolumeRenderer
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

PALETTE: Dict[str, tuple] = {
    "red": (0.68, 0.13, 0.13),
    "blue": (0.16, 0.29, 0.84),
    "purple": (0.51, 0.15, 0.75),
    "gray": (0.50, 0.50, 0.50),
    "cyan": (0.16, 0.82, 0.82),
    "yellow": (1.00, 0.93, 0.20),
    "green": (0.11, 0.41, 0.08),
    "brown": (0.51, 0.29, 0.10),
}
SHAPES = ("sphere", "box", "cylinder")
TEXTURES = ("checker", "stripes", "plain")
SMOOTH_BETA = 40.0
TEXTURE_TILE = 0.5
MAX_PLACEMENT_ATTEMPTS = 1000

MANIFEST_FILE = "manifest.json"
CAMERAS_FILE = "cameras.json"
SCENE_FILE = "scene.json"
SCENE_DIR_TEMPLATE = "scene_{index:05d}"
VIEW_FILE_TEMPLATE = "view_{view}.png"
MASK_FILE_TEMPLATE = "mask_{view}.png"


class PlacementError(RuntimeError):
    """在最大尝试次数内无法放下互不重叠的物体。"""


class DatasetValidationError(ValueError):
    """数据集目录缺文件、位姿非法或掩码与图像不一致。"""


# --- 场景描述 ---

@dataclass
class ObjectSpec:
    """center 为世界坐标（物体底面贴地）；size 为球半径 / 盒半边长 / 圆柱半径与半高。"""
    shape: str
    center: List[float]
    size: float
    yaw: float
    color_name: str

    @property
    def color(self) -> np.ndarray:
        return np.array(PALETTE[self.color_name])

    @property
    def footprint(self) -> float:
        """水平面上的外接圆半径，用于重叠检查。"""
        return self.size * math.sqrt(2.0) if self.shape == "box" else self.size


@dataclass
class BackgroundSpec:
    half_extent: float
    texture: str
    texture_seed: int
    floor_colors: List[List[float]]
    wall_color: List[float]


@dataclass
class CameraRing:
    radius: float
    elevation: float
    azimuths: List[float]
    focal_ratio: float
    near: float
    far: float

    def views(self, resolution: int) -> List[CameraView]:
        focal = self.focal_ratio * resolution
        return [
            CameraView(focal=focal, cx=resolution / 2.0, cy=resolution / 2.0, width=resolution, height=resolution,
                       cam_to_world=ring_pose(self.radius, self.elevation, azimuth), near=self.near, far=self.far)
            for azimuth in self.azimuths
        ]


@dataclass
class SceneSpec:
    objects: List[ObjectSpec]
    background: BackgroundSpec
    camera: CameraRing
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        return cls(
            objects=[ObjectSpec(**o) for o in data["objects"]],
            background=BackgroundSpec(**data["background"]),
            camera=CameraRing(**data["camera"]),
            seed=int(data.get("seed", 0)),
        )


def _overlaps(candidate: ObjectSpec, placed: Sequence[ObjectSpec]) -> bool:
    for other in placed:
        gap = np.linalg.norm(np.subtract(candidate.center[:2], other.center[:2]))
        if gap < candidate.footprint + other.footprint:
            return True
    return False


def sample_scene(config: SceneGenConfig, seed: int) -> SceneSpec:
    """按种子拒绝采样物体位置，直到互不重叠且都在房间内。"""
    generator = rng_lib.generator(seed, "scene")
    count = int(generator.integers(config.min_objects, config.max_objects + 1))
    colors = list(PALETTE)
    objects: List[ObjectSpec] = []
    attempts = 0
    while len(objects) < count:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(
                f"{MAX_PLACEMENT_ATTEMPTS} 次尝试内无法放下 {count} 个物体 (placement_radius={config.placement_radius}, "
                f"object_sizes={config.object_sizes})，场景过于拥挤"
            )
        shape = config.shapes[int(generator.integers(len(config.shapes)))]
        size = float(config.object_sizes[int(generator.integers(len(config.object_sizes)))])
        radius = config.placement_radius * math.sqrt(generator.random())
        angle = 2.0 * math.pi * generator.random()
        yaw = float(generator.uniform(0.0, 2.0 * math.pi)) if shape == "box" else 0.0
        candidate = ObjectSpec(
            shape=shape,
            center=[radius * math.cos(angle), radius * math.sin(angle), size],
            size=size,
            yaw=yaw,
            color_name=colors[int(generator.integers(len(colors)))],
        )
        inside = math.hypot(*candidate.center[:2]) + candidate.footprint <= config.room_half_extent
        if inside and not _overlaps(candidate, objects):
            objects.append(candidate)

    texture = config.textures[int(generator.integers(len(config.textures)))]
    floor_colors = (0.3 + 0.5 * generator.random((2, 3))).round(6).tolist()
    background = BackgroundSpec(
        half_extent=config.room_half_extent,
        texture=texture,
        texture_seed=int(generator.integers(2 ** 31)),
        floor_colors=floor_colors,
        wall_color=(0.45 + 0.4 * generator.random(3)).round(6).tolist(),
    )
    elevation = math.radians(config.elevation_deg + config.elevation_bump_deg)
    camera = CameraRing(
        radius=config.camera_radius,
        elevation=elevation,
        azimuths=sorted(float(a) for a in generator.uniform(0.0, 2.0 * math.pi, config.num_views)),
        focal_ratio=config.focal_ratio,
        near=config.near,
        far=config.far,
    )
    logger.debug(f"场景 seed={seed}: {count} 个物体，{attempts} 次尝试，背景纹理 {texture}")
    return SceneSpec(objects=objects, background=background, camera=camera, seed=int(seed))


# --- 解析密度场 ---

def smooth_min(values: np.ndarray, beta: float = SMOOTH_BETA) -> np.ndarray:
    """沿第 0 轴的 soft-min：−log Σ exp(−β a) / β。"""
    return -np.logaddexp.reduce(-beta * values, axis=0) / beta


def smooth_max(values: np.ndarray, beta: float = SMOOTH_BETA) -> np.ndarray:
    return np.logaddexp.reduce(beta * values, axis=0) / beta


def inside_distance(obj: ObjectSpec, points: np.ndarray) -> np.ndarray:
    """物体内部为正、外部为负的近似有符号距离。"""
    local = points - np.asarray(obj.center)
    if obj.shape == "sphere":
        return obj.size - np.linalg.norm(local, axis=-1)
    if obj.shape == "box":
        c, s = math.cos(obj.yaw), math.sin(obj.yaw)
        x = c * local[..., 0] + s * local[..., 1]
        y = -s * local[..., 0] + c * local[..., 1]
        faces = np.stack([obj.size - np.abs(x), obj.size - np.abs(y), obj.size - np.abs(local[..., 2])])
        return smooth_min(faces)
    if obj.shape == "cylinder":
        radial = np.hypot(local[..., 0], local[..., 1])
        return smooth_min(np.stack([obj.size - radial, obj.size - np.abs(local[..., 2])]))
    raise ValueError(f"未知的物体形状: {obj.shape}")


def room_solidity(background: BackgroundSpec, points: np.ndarray) -> np.ndarray:
    """地面 z=0 与四面墙之外为正：各半空间的 soft-max。"""
    h = background.half_extent
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    return smooth_max(np.stack([-z, x - h, -x - h, y - h, -y - h]))


def room_color(background: BackgroundSpec, points: np.ndarray) -> np.ndarray:
    h = background.half_extent
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    wall_depth = np.max(np.stack([x - h, -x - h, y - h, -y - h]), axis=0)
    on_floor = -z >= wall_depth
    first, second = np.asarray(background.floor_colors[0]), np.asarray(background.floor_colors[1])
    phase = (background.texture_seed % 97) / 97.0 * TEXTURE_TILE
    if background.texture == "checker":
        parity = (np.floor((x + phase) / TEXTURE_TILE) + np.floor((y + phase) / TEXTURE_TILE)) % 2
    elif background.texture == "stripes":
        parity = np.floor((x + y + phase) / TEXTURE_TILE) % 2
    elif background.texture == "plain":
        parity = np.zeros_like(x)
    else:
        raise ValueError(f"未知的背景纹理: {background.texture}")
    floor = np.where(parity[..., None] > 0, second, first)
    return np.where(on_floor[..., None], floor, np.asarray(background.wall_color))


class AnalyticSceneFields(SceneFields):
    """
    分量 0 为房间，分量 i 为第 i 个物体；
    密度 σ_max·sigmoid(k·d)，颜色为物体常数色或房间纹理。
    """
    def __init__(self, spec: SceneSpec, sigma_max: float = 60.0, sharpness: float = 20.0):
        self.spec = spec
        self.sigma_max = sigma_max
        self.sharpness = sharpness

    @property
    def num_components(self) -> int:
        return len(self.spec.objects) + 1

    def density(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        layers = [room_solidity(self.spec.background, points)]
        layers += [inside_distance(obj, points) for obj in self.spec.objects]
        return self.sigma_max * expit(self.sharpness * np.stack(layers))

    def color(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        layers = [room_color(self.spec.background, points)]
        layers += [np.broadcast_to(obj.color, points.shape) for obj in self.spec.objects]
        return np.stack(layers)

    def evaluate(self, points_world: np.ndarray) -> RadianceSampleBatch:
        return RadianceSampleBatch(color=Tensor(self.color(points_world)), density=Tensor(self.density(points_world)))


# --- 渲染与读写 ---

@dataclass
class SceneRecord:
    """images: [V,3,h,w] ∈ [0,1]；masks: [V,h,w]，0 为背景，i 为第 i 个物体。"""
    name: str
    images: np.ndarray
    masks: np.ndarray
    views: List[CameraView]
    spec: Optional[SceneSpec] = None

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])


def render_dataset(spec: SceneSpec, views: Optional[List[CameraView]] = None, resolution: int = 96,
                   num_samples: int = 128, renderer: Optional[VolumeRenderer] = None,
                   sigma_max: float = 60.0, sharpness: float = 20.0, name: str = "") -> SceneRecord:
    """用解析场渲染一个场景的所有视角；掩码为各分量密度图的 argmax。"""
    renderer = renderer or VolumeRenderer()
    views = views if views is not None else spec.camera.views(resolution)
    analytic = AnalyticSceneFields(spec, sigma_max=sigma_max, sharpness=sharpness)
    images, masks = [], []
    with no_grad():
        for view in views:
            rgb, _, _ = renderer.render_maps(analytic, view, num_samples)
            images.append(rgb)
            masks.append(renderer.render_slot_density_maps(analytic, view, num_samples).labels)
    return SceneRecord(name=name, images=np.stack(images), masks=np.stack(masks), views=list(views), spec=spec)


def generate_dataset(config: SceneGenConfig, seed: int, strategy: Optional[ExecutionStrategy] = None,
                     num_scenes: Optional[int] = None) -> List[SceneRecord]:
    """按场景并行生成；每个场景的种子由 (数据集种子, 场景序号) 派生。"""
    strategy = strategy or SequentialStrategy()
    count = config.num_scenes if num_scenes is None else num_scenes

    def build(index: int) -> SceneRecord:
        spec = sample_scene(config, rng_lib.derive_seed(seed, "scene", index))
        return render_dataset(spec, resolution=config.resolution, num_samples=config.render_samples,
                              sigma_max=config.sigma_max, sharpness=config.sharpness,
                              name=SCENE_DIR_TEMPLATE.format(index=index))

    records = strategy.map(build, list(range(count)))
    logger.info(f"已生成 {len(records)} 个场景 (分辨率 {config.resolution}, 每场景 {config.num_views} 个视角)")
    return records


def _write_json(path: Path, payload: Any) -> None:
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def write_scene(record: SceneRecord, scene_dir: Path) -> Path:
    """先写入临时目录，再整体改名；已有同名场景会被替换。"""
    scene_dir = Path(scene_dir)
    tmp_dir = scene_dir.with_name("." + scene_dir.name + ".tmp")
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    tmp_dir.mkdir(parents=True)
    for v in range(record.num_views):
        image_io.write_rgb(tmp_dir / VIEW_FILE_TEMPLATE.format(view=v), record.images[v])
        image_io.write_labels(tmp_dir / MASK_FILE_TEMPLATE.format(view=v), record.masks[v])
    _write_json(tmp_dir / CAMERAS_FILE, [view.to_dict() for view in record.views])
    if record.spec is not None:
        _write_json(tmp_dir / SCENE_FILE, record.spec.to_dict())
    if scene_dir.exists():
        shutil.rmtree(scene_dir)
    os.replace(tmp_dir, scene_dir)
    return scene_dir


def write_dataset(records: Sequence[SceneRecord], root: Union[str, Path], digest: str = "",
                  seed: Optional[int] = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for index, record in enumerate(records):
        write_scene(record, root / (record.name or SCENE_DIR_TEMPLATE.format(index=index)))
    manifest = {
        "count": len(records),
        "resolution": records[0].resolution if records else 0,
        "num_views": records[0].num_views if records else 0,
        "generator_digest": digest,
        "seed": seed,
        "scenes": [record.name or SCENE_DIR_TEMPLATE.format(index=i) for i, record in enumerate(records)],
    }
    tmp_manifest = root / (MANIFEST_FILE + ".tmp")
    _write_json(tmp_manifest, manifest)
    os.replace(tmp_manifest, root / MANIFEST_FILE)
    logger.info(f"数据集已写入 {root} ({len(records)} 个场景)")
    return root


def load_scene(scene_dir: Union[str, Path], num_views: Optional[int] = None) -> SceneRecord:
    """读取并校验一个场景目录。"""
    scene_dir = Path(scene_dir)
    name = scene_dir.name
    cameras_path = scene_dir / CAMERAS_FILE
    if not cameras_path.is_file():
        raise DatasetValidationError(f"场景 {name} 缺少 {CAMERAS_FILE}")
    try:
        camera_dicts = json.loads(cameras_path.read_text(encoding="utf-8"))
        views = [CameraView.from_dict(d) for d in camera_dicts]
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetValidationError(f"场景 {name} 的相机参数非法: {e}") from e
    if num_views is not None and len(views) != num_views:
        raise DatasetValidationError(f"场景 {name} 有 {len(views)} 个相机，期望 {num_views}")

    spec = None
    if (scene_dir / SCENE_FILE).is_file():
        spec = SceneSpec.from_dict(json.loads((scene_dir / SCENE_FILE).read_text(encoding="utf-8")))
    max_label = len(spec.objects) if spec is not None else 255

    images, masks = [], []
    for v, view in enumerate(views):
        view_path = scene_dir / VIEW_FILE_TEMPLATE.format(view=v)
        mask_path = scene_dir / MASK_FILE_TEMPLATE.format(view=v)
        if not view_path.is_file():
            raise DatasetValidationError(f"场景 {name} 视角 {v} 缺少图像文件 {view_path.name}")
        if not mask_path.is_file():
            raise DatasetValidationError(f"场景 {name} 视角 {v} 缺少掩码文件 {mask_path.name}")
        image = image_io.read_rgb(view_path)
        mask = image_io.read_labels(mask_path)
        if image.shape[1:] != (view.height, view.width):
            raise DatasetValidationError(f"场景 {name} 视角 {v} 的图像尺寸 {image.shape[1:]} 与相机 {view.height}x{view.width} 不一致")
        if mask.shape != image.shape[1:]:
            raise DatasetValidationError(f"场景 {name} 视角 {v} 的掩码尺寸 {mask.shape} 与图像 {image.shape[1:]} 不一致")
        if mask.max() > max_label:
            raise DatasetValidationError(f"场景 {name} 视角 {v} 的掩码标签 {mask.max()} 超出物体数 {max_label}")
        images.append(image)
        masks.append(mask)
    return SceneRecord(name=name, images=np.stack(images), masks=np.stack(masks), views=views, spec=spec)


@dataclass
class SceneDataset:
    """已校验的数据集目录；场景按需读取。"""
    root: Path
    manifest: Dict[str, Any]
    scene_dirs: List[Path] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scene_dirs)

    def __getitem__(self, index: int) -> SceneRecord:
        return load_scene(self.scene_dirs[index], self.manifest.get("num_views"))

    def __iter__(self) -> Iterator[SceneRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def resolution(self) -> int:
        return int(self.manifest.get("resolution", 0))


def load_dataset(root: Union[str, Path], validate: bool = True) -> SceneDataset:
    """读取数据集；validate=True 时逐个场景校验全部文件。"""
    root = Path(root)
    manifest_path = root / MANIFEST_FILE
    if not manifest_path.is_file():
        raise DatasetValidationError(f"数据集 {root} 缺少 {MANIFEST_FILE}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    names = manifest.get("scenes") or [SCENE_DIR_TEMPLATE.format(index=i) for i in range(int(manifest["count"]))]
    scene_dirs = [root / n for n in names]
    for scene_dir in scene_dirs:
        if not scene_dir.is_dir():
            raise DatasetValidationError(f"数据集 {root} 缺少场景目录 {scene_dir.name}")
    if validate:
        for scene_dir in scene_dirs:
            load_scene(scene_dir, manifest.get("num_views"))
    if not scene_dirs:
        raise DatasetValidationError(f"数据集 {root} 为空")
    logger.info(f"数据集 {root} 载入完成：{len(scene_dirs)} 个场景")
    return SceneDataset(root=root, manifest=manifest, scene_dirs=scene_dirs)
