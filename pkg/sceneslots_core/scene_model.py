# 可学习的整体模型：编码器 + 前景/背景解码器

import logging
from typing import Optional

import numpy as np

from . import rng as rng_lib
from .camera import CameraView
from .checkpoint import Checkpoint
from .config_manager import ModelConfig
from .encoder import SceneEncoder, SlotSet
from .fields import LocalityBox, NeuralSceneFields, RadianceDecoder
from .nets import Module, PositionalEncoder
from .tensor import Tensor

logger = logging.getLogger(__name__)


class SceneModel(Module):
    """
    参数名前缀：encoder.*、fg_decoder.*、bg_decoder.*。
    所有前景槽共享同一个 fg_decoder。
    """
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.pe = PositionalEncoder(config.num_frequencies)
        self.encoder = SceneEncoder(config, rng_lib.generator(seed, "init", "encoder"))
        self.fg_decoder = RadianceDecoder(self.pe.out_dim, config.slot_dim, config.decoder_width, config.fg_layers,
                                          rng_lib.generator(seed, "init", "fg_decoder"), skip_layer=config.skip_layer)
        self.bg_decoder = RadianceDecoder(self.pe.out_dim, config.slot_dim, config.decoder_width, config.bg_layers,
                                          rng_lib.generator(seed, "init", "bg_decoder"), skip_layer=config.skip_layer)
        logger.info(f"SceneModel 初始化完成：K={config.num_slots}, D={config.slot_dim}, 参数量 {self.num_parameters()}")

    def encode(self, image: Tensor, seed: int) -> SlotSet:
        """任意分辨率的输入图像 [3,H,W] -> SlotSet。"""
        return self.encoder(self.encoder.prepare_input(image), seed)

    @staticmethod
    def locality_box(view: CameraView, coverage: float = 0.9, active: bool = True) -> LocalityBox:
        center_distance = float(np.linalg.norm(view.position))
        return LocalityBox.for_view(view, center_distance, coverage, active)

    def scene_fields(self, slots: SlotSet, input_view: CameraView, box: Optional[LocalityBox] = None,
                     translations: Optional[np.ndarray] = None, removed: Optional[np.ndarray] = None) -> NeuralSceneFields:
        return NeuralSceneFields(
            self.fg_decoder, self.bg_decoder, self.pe, slots, input_view, box=box,
            scene_scale=self.config.scene_scale, translations=translations, removed=removed,
            background_frame=self.config.background_frame,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, config: ModelConfig) -> "SceneModel":
        """按配置重建模型结构并载入检查点中的 param/ 条目。"""
        model = cls(config, seed=int(checkpoint.metadata.get("seed", 0)))
        model.load_state_dict(checkpoint.parameters())
        return model
