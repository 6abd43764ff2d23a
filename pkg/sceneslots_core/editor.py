# sceneslots_core/editor.py
# 槽级三维场景编辑：平移物体、替换背景、删除物体

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .camera import CameraView
from .encoder import SlotSet
from .fields import LocalityBox, NeuralSceneFields
from .renderer import SlotDensityMaps
from .scene_model import SceneModel
from .tensor import Tensor

logger = logging.getLogger(__name__)

BINARIZE_FRACTION = 0.5


class EditError(ValueError):
    """编辑计划不合法（槽下标越界、多个背景替换、参数格式错误）。"""


class NoObjectFoundError(LookupError):
    """所有前景槽的密度图都为零。"""


@dataclass
class Move:
    """slot 为 1..K 的前景槽下标；也可只给 mask_label，由输入视角掩码 IoU 选槽。"""
    translation: np.ndarray
    slot: Optional[int] = None
    mask_label: Optional[int] = None


@dataclass
class Remove:
    slot: Optional[int] = None
    mask_label: Optional[int] = None


@dataclass
class SwapBackground:
    """background: 另一个 SlotSet 的背景隐变量 [1, D]；scene: 由调用方编码的场景目录。"""
    background: Optional[np.ndarray] = None
    scene: Optional[str] = None


Edit = Union[Move, Remove, SwapBackground]


@dataclass
class EditPlan:
    edits: List[Edit] = field(default_factory=list)

    def validate(self, num_slots: int, slot_dim: Optional[int] = None) -> None:
        swaps = [e for e in self.edits if isinstance(e, SwapBackground)]
        if len(swaps) > 1:
            raise EditError(f"编辑计划最多包含一个背景替换，得到 {len(swaps)} 个")
        for position, edit in enumerate(self.edits):
            if isinstance(edit, (Move, Remove)):
                if edit.slot is None and edit.mask_label is None:
                    raise EditError(f"第 {position} 个编辑既没有 slot 也没有 mask_label")
                if edit.slot is not None and not 1 <= edit.slot <= num_slots:
                    raise EditError(f"第 {position} 个编辑的槽下标 {edit.slot} 超出范围 [1, {num_slots}]")
            if isinstance(edit, Move):
                t = np.asarray(edit.translation, dtype=np.float64)
                if t.shape != (3,) or not np.all(np.isfinite(t)):
                    raise EditError(f"第 {position} 个编辑的平移量须为 3 个有限数，得到 {edit.translation}")
            if isinstance(edit, SwapBackground) and edit.background is not None and slot_dim is not None:
                if np.asarray(edit.background).reshape(-1).shape != (slot_dim,):
                    raise EditError(f"替换背景隐变量须有 {slot_dim} 维，得到 {np.shape(edit.background)}")

    @property
    def needs_mask(self) -> bool:
        return any(isinstance(e, (Move, Remove)) and e.slot is None for e in self.edits)

    @classmethod
    def from_json(cls, source: Union[str, Path, Dict[str, Any]]) -> "EditPlan":
        """
        {"edits": [{"op": "move", "slot": 1, "translation": [x, y, z]},
                   {"op": "remove", "mask_label": 2},
                   {"op": "swap_background", "scene": "path/to/scene_00001"}]}
        """
        if isinstance(source, dict):
            document = source
        else:
            if isinstance(source, Path) or _names_file(source):
                try:
                    text = Path(source).read_text(encoding="utf-8")
                except OSError as e:
                    raise EditError(f"无法读取编辑计划 {source}: {e}") from e
            else:
                text = str(source)
            try:
                document = json.loads(text)
            except json.JSONDecodeError as e:
                raise EditError(f"编辑计划不是合法的 JSON: {e}") from e
        if not isinstance(document, dict) or not isinstance(document.get("edits", []), list):
            raise EditError("编辑计划须为包含 edits 列表的对象")
        edits: List[Edit] = []
        for position, item in enumerate(document.get("edits", [])):
            op = item.get("op") if isinstance(item, dict) else None
            if op == "move":
                edits.append(Move(translation=np.asarray(item.get("translation", []), dtype=np.float64),
                                  slot=item.get("slot"), mask_label=item.get("mask_label")))
            elif op == "remove":
                edits.append(Remove(slot=item.get("slot"), mask_label=item.get("mask_label")))
            elif op == "swap_background":
                latent = item.get("latent")
                edits.append(SwapBackground(background=None if latent is None else np.asarray(latent, dtype=np.float64),
                                            scene=item.get("scene")))
            else:
                raise EditError(f"第 {position} 个编辑的 op 未知: {op!r}")
        return cls(edits)


def _names_file(source: str) -> bool:
    if source.lstrip().startswith(("{", "[")):
        return False
    try:
        return Path(source).is_file()
    except (OSError, ValueError):
        return False


@dataclass
class EditedScene:
    """编辑后的槽集合与查询时变换：每个前景槽的平移量与删除标记。"""
    slots: SlotSet
    translations: np.ndarray
    removed: np.ndarray

    def fields(self, model: SceneModel, input_view: CameraView, box: Optional[LocalityBox] = None) -> NeuralSceneFields:
        return model.scene_fields(self.slots, input_view, box=box,
                                  translations=self.translations, removed=self.removed)


def select_slot_by_mask(density_maps: Union[SlotDensityMaps, np.ndarray], mask: np.ndarray,
                        label: Optional[int] = None) -> int:
    """
    每个前景槽的密度图在其最大值的一半处二值化，返回与掩码 IoU 最大的槽 (1..K)。
    并列时取最小下标并记录警告。
    """
    maps = density_maps.maps if isinstance(density_maps, SlotDensityMaps) else np.asarray(density_maps)
    target = np.asarray(mask)
    target = (target == label) if label is not None else target.astype(bool)
    if maps.shape[1:] != target.shape:
        raise ValueError(f"密度图分辨率 {maps.shape[1:]} 与掩码 {target.shape} 不一致")
    foreground = maps[1:]
    peaks = foreground.reshape(foreground.shape[0], -1).max(axis=1)
    if not np.any(peaks > 0):
        raise NoObjectFoundError("所有前景槽的密度图都为零，未找到物体")
    ious = np.zeros(foreground.shape[0])
    for i, (density, peak) in enumerate(zip(foreground, peaks)):
        if peak <= 0:
            continue
        support = density >= BINARIZE_FRACTION * peak
        union = np.logical_or(support, target).sum()
        ious[i] = np.logical_and(support, target).sum() / union if union else 0.0
    best = int(np.argmax(ious))
    if np.count_nonzero(ious == ious[best]) > 1:
        logger.warning(f"多个槽的掩码 IoU 并列 ({ious[best]:.4f})，选择下标最小的槽 {best + 1}")
    logger.debug(f"各槽 IoU: {np.round(ious, 4).tolist()}")
    return best + 1


def resolve_slots(plan: EditPlan, density_maps: Optional[SlotDensityMaps], mask: Optional[np.ndarray]) -> EditPlan:
    """把按掩码标签指定的编辑换成具体的槽下标。"""
    if not plan.needs_mask:
        return plan
    if density_maps is None or mask is None:
        raise EditError("编辑计划按 mask_label 选槽，但没有提供输入视角的密度图与掩码")
    resolved: List[Edit] = []
    for edit in plan.edits:
        if isinstance(edit, (Move, Remove)) and edit.slot is None:
            slot = select_slot_by_mask(density_maps, mask, edit.mask_label)
            logger.info(f"掩码标签 {edit.mask_label} 对应槽 {slot}")
            if isinstance(edit, Move):
                edit = Move(translation=edit.translation, slot=slot, mask_label=edit.mask_label)
            else:
                edit = Remove(slot=slot, mask_label=edit.mask_label)
        resolved.append(edit)
    return EditPlan(resolved)


def apply_edits(slots: SlotSet, plan: EditPlan) -> EditedScene:
    """
    Move 累加到对应槽的查询时平移（隐变量不变）；Remove 把该槽密度置零；
    SwapBackground 替换背景隐变量。
    """
    plan.validate(slots.num_slots, slots.dim)
    if plan.needs_mask:
        raise EditError("编辑计划中仍有未解析的 mask_label，请先调用 resolve_slots")
    translations = np.zeros((slots.num_slots, 3))
    removed = np.zeros(slots.num_slots, dtype=bool)
    edited = slots
    for edit in plan.edits:
        if isinstance(edit, Move):
            translations[edit.slot - 1] += np.asarray(edit.translation, dtype=np.float64)
        elif isinstance(edit, Remove):
            removed[edit.slot - 1] = True
        elif isinstance(edit, SwapBackground):
            if edit.background is None:
                raise EditError("背景替换缺少背景隐变量")
            edited = edited.with_background(Tensor(np.asarray(edit.background).reshape(1, -1)))
    logger.info(f"应用 {len(plan.edits)} 个编辑：平移 {int(np.any(translations != 0, axis=1).sum())} 个槽，删除 {int(removed.sum())} 个槽")
    return EditedScene(slots=edited, translations=translations, removed=removed)
