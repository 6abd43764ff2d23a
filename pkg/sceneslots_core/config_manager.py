# sceneslots_core/config_manager.py
# 配置管理器模块

import configparser
import dataclasses
import hashlib
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_type_hints

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "SCENESLOTS_CONFIG"
DEFAULT_CONFIG_FILE = "config.ini"


class ConfigError(ValueError):
    """配置文件或命令行覆盖项不合法。"""


@dataclass
class LoggingConfig:
    level: str = "INFO"
    log_file: str = "sceneslots.log"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class RuntimeConfig:
    seed: int = 0
    threads: int = 1
    precision: str = "float32"
    chunk_size: int = 4096


@dataclass
class ModelConfig:
    num_slots: int = 4
    slot_dim: int = 32
    encoder_channels: int = 64
    encoder_variant: str = "compact"
    encoder_resolution: int = 48
    attention_iters: int = 3
    mlp_hidden: int = 64
    decoder_width: int = 64
    fg_layers: int = 5
    bg_layers: int = 3
    skip_layer: int = 3
    num_frequencies: int = 5
    scene_scale: float = 0.25
    background_frame: str = "world"
    collapse_threshold: float = 0.999
    extractor_channels: Tuple[int, ...] = (16, 32, 64)
    disc_channels: Tuple[int, ...] = (32, 64, 128, 128)


@dataclass
class TrainConfig:
    coarse_steps: int = 30000
    fine_steps: int = 30000
    coarse_resolution: int = 48
    full_resolution: int = 96
    patch_size: int = 48
    coarse_samples: int = 48
    fine_samples: int = 64
    num_views: int = 4
    jitter: bool = True
    lr: float = 0.0003
    betas: Tuple[float, ...] = (0.9, 0.999)
    disc_lr: float = 0.001
    disc_betas: Tuple[float, ...] = (0.0, 0.9)
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    decay_period: int = 0
    max_halvings: int = 3
    box_fraction: float = 0.3
    box_coverage: float = 0.9
    loss_onset_fraction: float = 0.1667
    lambda_percept: float = 0.006
    lambda_adv: float = 0.01
    lambda_r1: float = 10.0
    adversarial: bool = False
    r1_interval: int = 1
    checkpoint_every: int = 5000
    snapshot_every: int = 5000


@dataclass
class SceneGenConfig:
    num_scenes: int = 300
    num_views: int = 4
    resolution: int = 96
    render_samples: int = 128
    min_objects: int = 2
    max_objects: int = 3
    shapes: Tuple[str, ...] = ("sphere", "box", "cylinder")
    object_sizes: Tuple[float, ...] = (0.3, 0.45)
    room_half_extent: float = 4.0
    placement_radius: float = 0.9
    camera_radius: float = 3.2
    elevation_deg: float = 30.0
    elevation_bump_deg: float = 12.0
    focal_ratio: float = 1.07
    near: float = 0.5
    far: float = 8.0
    sigma_max: float = 60.0
    sharpness: float = 20.0
    textures: Tuple[str, ...] = ("checker", "stripes", "plain")


@dataclass
class EvalConfig:
    seeds: Tuple[int, ...] = (0, 1, 2)
    input_view: int = 0
    samples: int = 64
    resolution: int = 0
    max_scenes: int = 0


@dataclass
class PathsConfig:
    data_dir: str = "./data"
    runs_dir: str = "./runs"
    run_name: str = ""


SECTIONS: Dict[str, type] = {
    "Logging": LoggingConfig,
    "Runtime": RuntimeConfig,
    "Model": ModelConfig,
    "Train": TrainConfig,
    "SceneGen": SceneGenConfig,
    "Eval": EvalConfig,
    "Paths": PathsConfig,
}

_ATTRIBUTES = {
    "Logging": "logging", "Runtime": "runtime", "Model": "model", "Train": "train",
    "SceneGen": "scenegen", "Eval": "eval", "Paths": "paths",
}

PRESETS: Dict[str, Dict[str, Dict[str, str]]] = {
    "desk": {},
    "clevr567": {
        "Model": {"num_slots": "8", "slot_dim": "40", "encoder_variant": "compact", "encoder_resolution": "64"},
        "Train": {"coarse_steps": "600000", "fine_steps": "600000", "coarse_resolution": "64",
                  "full_resolution": "128", "patch_size": "64", "coarse_samples": "64", "fine_samples": "64"},
        "SceneGen": {"min_objects": "5", "max_objects": "7", "shapes": "sphere,box,cylinder",
                     "placement_radius": "1.6", "camera_radius": "4.5", "object_sizes": "0.2,0.3",
                     "resolution": "128", "textures": "plain"},
    },
    "room_chair": {
        "Model": {"num_slots": "5", "slot_dim": "64", "encoder_variant": "compact", "encoder_resolution": "64"},
        "Train": {"coarse_steps": "600000", "fine_steps": "600000", "coarse_resolution": "64",
                  "full_resolution": "128", "patch_size": "64", "coarse_samples": "64", "fine_samples": "64"},
        "SceneGen": {"min_objects": "3", "max_objects": "4", "resolution": "128", "textures": "checker,stripes,plain"},
    },
    "room_diverse": {
        "Model": {"num_slots": "5", "slot_dim": "64", "encoder_variant": "stem", "encoder_resolution": "128"},
        "Train": {"coarse_steps": "600000", "fine_steps": "600000", "coarse_resolution": "64",
                  "full_resolution": "128", "patch_size": "64", "coarse_samples": "64", "fine_samples": "64",
                  "adversarial": "true"},
        "SceneGen": {"min_objects": "3", "max_objects": "4", "resolution": "128", "textures": "checker,stripes"},
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, raw: str, annotation: Any) -> Any:
    text = raw.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError("不是布尔值")
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        item_type = annotation.__args__[0]
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(item_type(t) for t in items)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {key} = {raw!r} 无法解析: {e}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ConfigManager:
    """
    配置管理器类，负责加载、校验与导出全部配置。

    生效顺序：默认值 -> 预设 -> 配置文件 -> 命令行覆盖。
    """

    def __init__(self,
                 config_file_path: Optional[Union[str, Path]] = None,
                 preset: Optional[str] = None,
                 overrides: Optional[Mapping[str, Mapping[str, Any]]] = None):
        load_dotenv()

        self.logging = LoggingConfig()
        self.runtime = RuntimeConfig()
        self.model = ModelConfig()
        self.train = TrainConfig()
        self.scenegen = SceneGenConfig()
        self.eval = EvalConfig()
        self.paths = PathsConfig()

        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"未知预设 '{preset}'，可选: {sorted(PRESETS)}")
            self._apply(PRESETS[preset], source=f"预设 {preset}")
        self.preset = preset or "desk"

        if config_file_path is None:
            config_file_path = os.getenv(CONFIG_ENV_VAR) or (DEFAULT_CONFIG_FILE if Path(DEFAULT_CONFIG_FILE).exists() else None)
        self.config_file_path = Path(config_file_path) if config_file_path else None
        if self.config_file_path is not None:
            if not self.config_file_path.exists():
                logger.error(f"配置文件 {self.config_file_path} 不存在。")
                raise FileNotFoundError(f"配置文件 {self.config_file_path} 不存在。")
            self._apply(self._read(self.config_file_path.read_text(encoding="utf-8")), source=str(self.config_file_path))
            logger.info(f"成功加载配置文件: {self.config_file_path}")

        if overrides:
            self._apply({s: {k: _format(v) if not isinstance(v, str) else v for k, v in kv.items()}
                         for s, kv in overrides.items()}, source="命令行")

        self.validate()
        logger.info(f"ConfigManager 初始化完成 (预设 {self.preset})。")

    @classmethod
    def from_text(cls, text: str) -> "ConfigManager":
        """从 INI 文本构造（用于 dump 回读）。"""
        manager = cls.__new__(cls)
        manager.logging, manager.runtime, manager.model = LoggingConfig(), RuntimeConfig(), ModelConfig()
        manager.train, manager.scenegen = TrainConfig(), SceneGenConfig()
        manager.eval, manager.paths = EvalConfig(), PathsConfig()
        manager.preset = "desk"
        manager.config_file_path = None
        manager._apply(manager._read(text), source="文本")
        manager.validate()
        return manager

    @staticmethod
    def _read(text: str) -> Dict[str, Dict[str, str]]:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"配置文本解析失败: {e}") from None
        return {s: dict(parser.items(s)) for s in parser.sections()}

    def _apply(self, values: Mapping[str, Mapping[str, str]], source: str) -> None:
        for section, items in values.items():
            if section not in SECTIONS:
                raise ConfigError(f"{source}: 未知配置节 [{section}]，可选: {list(SECTIONS)}")
            target = getattr(self, _ATTRIBUTES[section])
            hints = get_type_hints(type(target))
            for key, raw in items.items():
                if key not in hints:
                    raise ConfigError(f"{source}: [{section}] 中未知的键 '{key}'")
                setattr(target, key, _coerce(section, key, str(raw), hints[key]))
            logger.debug(f"{source}: 应用 [{section}] 的 {len(items)} 个键")

    def validate(self) -> None:
        """检查跨字段约束，违反时抛出 ConfigError。"""
        t, m, g = self.train, self.model, self.scenegen
        problems = []
        if t.patch_size > t.full_resolution:
            problems.append(f"patch_size ({t.patch_size}) 大于 full_resolution ({t.full_resolution})")
        if t.coarse_resolution <= 0 or t.full_resolution % t.coarse_resolution != 0:
            problems.append(f"coarse_resolution ({t.coarse_resolution}) 必须整除 full_resolution ({t.full_resolution})")
        if g.min_objects > g.max_objects or g.min_objects < 0:
            problems.append(f"物体数量范围非法: [{g.min_objects}, {g.max_objects}]")
        if g.max_objects > m.num_slots:
            logger.warning(f"场景最多 {g.max_objects} 个物体，多于前景槽数 {m.num_slots}")
        if t.num_views < 1 or g.num_views < 1:
            problems.append("视角数量必须 >= 1")
        if t.num_views > g.num_views:
            problems.append(f"训练视角数 ({t.num_views}) 超过数据集视角数 ({g.num_views})")
        for name, value in (("coarse_samples", t.coarse_samples), ("fine_samples", t.fine_samples),
                            ("render_samples", g.render_samples), ("Eval.samples", self.eval.samples),
                            ("attention_iters", m.attention_iters), ("num_slots", m.num_slots),
                            ("slot_dim", m.slot_dim), ("threads", self.runtime.threads),
                            ("r1_interval", t.r1_interval), ("chunk_size", self.runtime.chunk_size)):
            if value < 1:
                problems.append(f"{name} 必须为正，得到 {value}")
        if self.runtime.precision not in ("float32", "float64"):
            problems.append(f"precision 只能是 float32 或 float64，得到 {self.runtime.precision}")
        if m.encoder_variant not in ("compact", "stem"):
            problems.append(f"encoder_variant 只能是 compact 或 stem，得到 {m.encoder_variant}")
        if m.background_frame not in ("world", "viewer"):
            problems.append(f"background_frame 只能是 world 或 viewer，得到 {m.background_frame}")
        if not 1 <= m.skip_layer < m.fg_layers or m.bg_layers < 1:
            problems.append(f"解码器层数非法: fg_layers={m.fg_layers}, bg_layers={m.bg_layers}, skip_layer={m.skip_layer}")
        if t.adversarial and t.patch_size != t.coarse_resolution:
            problems.append(f"启用对抗损失时 patch_size ({t.patch_size}) 必须等于 coarse_resolution ({t.coarse_resolution})")
        if not 0.0 <= t.box_fraction <= 1.0 or not 0.0 < t.box_coverage <= 1.0:
            problems.append("box_fraction 须在 [0,1]，box_coverage 须在 (0,1]")
        if len(t.betas) != 2 or len(t.disc_betas) != 2:
            problems.append("betas 与 disc_betas 必须各含两个数")
        if not 0 < g.near < g.far:
            problems.append(f"需要 0 < near < far，得到 near={g.near}, far={g.far}")
        unknown_shapes = set(g.shapes) - {"sphere", "box", "cylinder"}
        if unknown_shapes or not g.shapes:
            problems.append(f"未知形状: {sorted(unknown_shapes)}")
        unknown_textures = set(g.textures) - {"checker", "stripes", "plain"}
        if unknown_textures or not g.textures:
            problems.append(f"未知纹理: {sorted(unknown_textures)}")
        if not g.object_sizes or min(g.object_sizes) <= 0:
            problems.append("object_sizes 必须为正")
        if problems:
            raise ConfigError("配置校验失败: " + "; ".join(problems))

    def section_items(self, section: str) -> Dict[str, str]:
        target = getattr(self, _ATTRIBUTES[section])
        return {f.name: _format(getattr(target, f.name)) for f in dataclasses.fields(target)}

    def dump(self) -> str:
        """把生效配置导出为 INI 文本；再次解析得到相同的配置。"""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section in SECTIONS:
            parser[section] = self.section_items(section)
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s: dataclasses.asdict(getattr(self, a)) for s, a in _ATTRIBUTES.items()}

    def _digest(self, sections, extra: str = "") -> str:
        text = "".join(f"[{s}]\n" + "".join(f"{k} = {v}\n" for k, v in sorted(self.section_items(s).items()))
                       for s in sections) + extra
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def model_digest(self) -> str:
        """检查点兼容性摘要：只覆盖 [Model] 节。"""
        return self._digest(["Model"])

    def dataset_digest(self, seed: Optional[int] = None) -> str:
        seed = self.runtime.seed if seed is None else seed
        return self._digest(["SceneGen"], extra=f"seed = {seed}\n")

    def get_logging_config(self) -> dict:
        """获取日志相关的配置"""
        return {
            "level": self.logging.level,
            "log_file": self.logging.log_file or None,
            "log_format": self.logging.log_format,
        }
