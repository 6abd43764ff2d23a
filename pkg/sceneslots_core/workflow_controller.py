# sceneslots_core/workflow_controller.py
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import image_io
from . import rng as rng_lib
from .camera import CameraView, orbit_views
from .checkpoint import EXTRACTOR_PREFIX, Checkpoint, read_checkpoint
from .config_manager import ConfigManager
from .editor import EditPlan, SwapBackground, apply_edits, resolve_slots
from .encoder import SlotSet
from .evaluator import ModelFieldsProvider, OracleFieldsProvider, SceneEvaluator, eval_run
from .fields import SceneFields
from .gradcheck import GradCheckReport, run_gradcheck
from .logger_setup import setup_logging
from .losses import FeatureExtractor
from .parallel import ExecutionStrategy, SequentialStrategy, make_strategy
from .renderer import VolumeRenderer
from .run_state import RunState
from .scene_model import SceneModel
from .scenegen import SceneRecord, generate_dataset, load_dataset, load_scene, write_dataset
from .tensor import Tensor, no_grad
from .trainer import RunResult, StepMetrics, Trainer, progressive_run
from .user_interaction import UserInteraction

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class GradCheckFailure(RuntimeError):
    """有限差分梯度检查未通过。"""


class WorkflowController:
    """
    协调各个命令对应的阶段：数据生成、训练、评估、渲染、编辑与梯度检查。
    每个阶段记录异常后原样抛出，由命令行入口映射为退出码。
    """
    def __init__(self,
                 config_manager: ConfigManager,
                 user_interaction: Optional[UserInteraction] = None,
                 run_state: Optional[RunState] = None,
                 strategy: Optional[ExecutionStrategy] = None):
        self.config_manager = config_manager
        self.user_interaction = user_interaction or UserInteraction()
        self.run_state = run_state or RunState(config_manager)
        self.strategy = strategy or make_strategy(config_manager.runtime.threads)
        self.seed = config_manager.runtime.seed
        logger.info(f"WorkflowController 初始化完成 (种子 {self.seed}, 线程 {config_manager.runtime.threads})。")

    def close(self) -> None:
        self.strategy.shutdown()

    # --- 共用 ---

    def _load_model(self, ckpt_path: PathLike, force: bool = False) -> Tuple[SceneModel, Checkpoint]:
        checkpoint = read_checkpoint(ckpt_path, expected_digest=self.config_manager.model_digest(), force=force)
        model = SceneModel.from_checkpoint(checkpoint, self.config_manager.model)
        return model, checkpoint

    def _extractor(self, checkpoint: Optional[Checkpoint]) -> FeatureExtractor:
        extractor = FeatureExtractor(self.config_manager.model.extractor_channels, self.seed)
        if checkpoint is not None:
            state = checkpoint.group(EXTRACTOR_PREFIX)
            if state:
                extractor.load_state_dict(state)
        return extractor

    def _renderer(self) -> VolumeRenderer:
        return VolumeRenderer(self.strategy, self.config_manager.runtime.chunk_size, self.seed)

    def _encode(self, model: SceneModel, record: SceneRecord, purpose: str) -> SlotSet:
        view = self.config_manager.eval.input_view
        if not 0 <= view < record.num_views:
            raise ValueError(f"输入视角 {view} 超出场景 {record.name} 的视角数 {record.num_views}")
        with no_grad():
            slots = model.encode(Tensor(record.images[view]), rng_lib.derive_seed(self.seed, purpose, record.name))
        if model.encoder.collapsed:
            logger.warning(f"场景 {record.name} 的槽出现注意力秩塌缩 (相似度 {model.encoder.last_similarity:.6f})")
        return slots

    def _output_size(self, record: SceneRecord) -> int:
        return self.config_manager.eval.resolution or record.resolution

    def _write_view_set(self, fields: SceneFields, views: Sequence[CameraView], out_dir: Path,
                        samples: int) -> List[Path]:
        """
        每个视角写出 rgb/、labels/、density/、depth/、opacity/ 下的 PNG；
        rgb/ 与 labels/ 中各恰好一张。
        """
        renderer = self._renderer()
        for sub in ("rgb", "labels", "density", "depth", "opacity"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
        written: List[Path] = []
        for i, view in enumerate(views):
            rgb, depth, opacity = renderer.render_maps(fields, view, samples)
            maps = renderer.render_slot_density_maps(fields, view, samples)
            rgb_path = out_dir / "rgb" / f"view_{i:03d}.png"
            label_path = out_dir / "labels" / f"view_{i:03d}.png"
            image_io.write_rgb(rgb_path, rgb)
            image_io.write_labels(label_path, maps.labels)
            image_io.write_gray(out_dir / "depth" / f"view_{i:03d}.png", depth, scale=view.far)
            image_io.write_gray(out_dir / "opacity" / f"view_{i:03d}.png", opacity, scale=1.0)
            for k, density in enumerate(maps.maps):
                image_io.write_gray(out_dir / "density" / f"view_{i:03d}_slot{k}.png", density, scale=1.0)
            written.extend([rgb_path, label_path])
        cameras = [view.to_dict() for view in views]
        (out_dir / "cameras.json").write_text(json.dumps(cameras, indent=2, sort_keys=True), encoding="utf-8")
        return written

    # --- 阶段 ---

    def run_gen_data(self, out_dir: PathLike, num_scenes: Optional[int] = None) -> Path:
        """按 [SceneGen] 配置生成数据集并写入 out_dir。"""
        cfg = self.config_manager.scenegen
        self.user_interaction.show_banner("gen-data", f"{num_scenes or cfg.num_scenes} 个场景 → {out_dir}")
        try:
            records = generate_dataset(cfg, self.seed, self.strategy, num_scenes)
            root = write_dataset(records, out_dir, digest=self.config_manager.dataset_digest(self.seed), seed=self.seed)
            self.user_interaction.display_outputs("数据集", [root / "manifest.json"])
            return root
        except Exception as e:
            logger.exception(f"生成数据集时发生错误: {e}")
            raise

    def run_train(self, data_dir: PathLike, out_dir: Optional[PathLike] = None, resume: Optional[PathLike] = None,
                  force: bool = False) -> RunResult:
        """渐进式训练；resume 给出时从检查点续训。"""
        self.user_interaction.show_banner("train", f"数据集 {data_dir}")
        try:
            dataset = load_dataset(data_dir)
            workspace = self.run_state.initialize_workspace("train", Path(out_dir) if out_dir else None)
            log_config = self.config_manager.get_logging_config()
            setup_logging(log_config["level"], self.run_state.log_file_path, log_config["log_format"])

            trainer = Trainer(self.config_manager, dataset, self.seed, self.strategy)
            if resume:
                checkpoint = read_checkpoint(resume, expected_digest=self.config_manager.model_digest(), force=force)
                trainer.load_checkpoint(checkpoint)

            total = trainer.total_steps
            every = max(1, total // 100)

            def on_step(metrics: StepMetrics) -> None:
                if (metrics.step + 1) % every == 0 or metrics.step + 1 == total:
                    self.user_interaction.display_step(metrics, total)

            result = progressive_run(trainer, self.run_state, on_step=on_step, keep_metrics=True)
            self.run_state.archive_run()
            self.user_interaction.display_training_summary(result)
            logger.info(f"训练工作区: {workspace}")
            return result
        except Exception as e:
            logger.exception(f"训练过程中发生错误: {e}")
            raise

    def run_eval(self, data_dir: PathLike, ckpt_path: Optional[PathLike] = None, seeds: Optional[Sequence[int]] = None,
                 out_path: Optional[PathLike] = None, oracle: bool = False, force: bool = False) -> Dict[str, Any]:
        """
        对数据集评估 ARI / NV-ARI / Fg-ARI 与图像质量指标。oracle=True 时
        用解析场代替模型，验证渲染-分割流程。
        """
        eval_cfg = self.config_manager.eval
        seeds = list(seeds) if seeds else list(eval_cfg.seeds)
        self.user_interaction.show_banner("eval", f"数据集 {data_dir}，种子 {seeds}")
        try:
            dataset = load_dataset(data_dir)
            checkpoint = None
            if oracle:
                sg = self.config_manager.scenegen
                provider = OracleFieldsProvider(sg.sigma_max, sg.sharpness)
            else:
                if ckpt_path is None:
                    raise ValueError("评估模型需要 --ckpt（或使用 --oracle）")
                model, checkpoint = self._load_model(ckpt_path, force)
                provider = ModelFieldsProvider(model, eval_cfg.input_view)
            # 场景间已并行，单个场景内顺序渲染
            renderer = VolumeRenderer(SequentialStrategy(), self.config_manager.runtime.chunk_size, self.seed)
            evaluator = SceneEvaluator(provider, eval_cfg, self._extractor(checkpoint), renderer,
                                       self.config_manager.model.collapse_threshold)
            report = eval_run(evaluator, dataset, seeds, self.strategy, eval_cfg.max_scenes)
            report["checkpoint"] = str(ckpt_path) if ckpt_path else None
            report["oracle"] = oracle
            if out_path is not None:
                out_path = Path(out_path)
                out_path.parent.mkdir(parents=True, exist_ok=True)
                out_path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default), encoding="utf-8")
                logger.info(f"评估报告已写入 {out_path}")
            run_dir = RunState.workspace_of(ckpt_path) if ckpt_path is not None else None
            if run_dir is not None:
                self.run_state.use_workspace(run_dir)
                self.run_state.save_report(json.loads(json.dumps(report, default=_json_default)))
            self.user_interaction.display_eval_report(report)
            return report
        except Exception as e:
            logger.exception(f"评估过程中发生错误: {e}")
            raise

    def run_render(self, ckpt_path: PathLike, scene_dir: PathLike, out_dir: PathLike,
                   views: Optional[Sequence[int]] = None, orbit: Optional[int] = None, force: bool = False) -> List[Path]:
        """
        新视角合成：views 为数据集相机下标（默认全部），orbit 为同一相机环上均匀的 N 个视角。
        """
        if views and orbit is not None:
            raise ValueError("--views 与 --orbit 不能同时使用")
        if orbit is not None and orbit < 1:
            raise ValueError(f"--orbit 须为正整数，得到 {orbit}")
        self.user_interaction.show_banner("render", f"场景 {scene_dir}")
        try:
            model, _ = self._load_model(ckpt_path, force)
            record = load_scene(scene_dir)
            slots = self._encode(model, record, "render")
            input_view = record.views[self.config_manager.eval.input_view]
            fields = model.scene_fields(slots, input_view)
            size = self._output_size(record)
            if orbit is not None:
                targets = orbit_from(input_view.scaled(size, size), orbit)
            else:
                indices = list(views) if views else list(range(record.num_views))
                for v in indices:
                    if not 0 <= v < record.num_views:
                        raise ValueError(f"视角下标 {v} 超出范围 [0, {record.num_views})")
                targets = [record.views[v].scaled(size, size) for v in indices]
            written = self._write_view_set(fields, targets, Path(out_dir), self.config_manager.eval.samples)
            self.user_interaction.display_outputs("渲染结果", written)
            return written
        except Exception as e:
            logger.exception(f"渲染过程中发生错误: {e}")
            raise

    def run_edit(self, ckpt_path: PathLike, scene_dir: PathLike, plan_path: PathLike, out_dir: PathLike,
                 force: bool = False) -> List[Path]:
        """按编辑计划修改槽并在数据集相机上渲染编辑后的场景。"""
        self.user_interaction.show_banner("edit", f"场景 {scene_dir}，计划 {plan_path}")
        try:
            model, _ = self._load_model(ckpt_path, force)
            record = load_scene(scene_dir)
            plan = EditPlan.from_json(Path(plan_path))
            slots = self._encode(model, record, "edit")
            view_index = self.config_manager.eval.input_view
            input_view = record.views[view_index]
            samples = self.config_manager.eval.samples

            for edit in plan.edits:
                if isinstance(edit, SwapBackground) and edit.background is None and edit.scene:
                    source = load_scene(Path(edit.scene))
                    edit.background = self._encode(model, source, "edit").background.data
            density_maps = None
            if plan.needs_mask:
                original = model.scene_fields(slots, input_view)
                density_maps = self._renderer().render_slot_density_maps(original, input_view, samples)
            plan = resolve_slots(plan, density_maps, record.masks[view_index])
            edited = apply_edits(slots, plan)

            size = self._output_size(record)
            targets = [view.scaled(size, size) for view in record.views]
            out_dir = Path(out_dir)
            written = self._write_view_set(edited.fields(model, input_view), targets, out_dir, samples)
            summary = {
                "translations": edited.translations.tolist(),
                "removed": edited.removed.tolist(),
                "background_swapped": any(isinstance(e, SwapBackground) for e in plan.edits),
            }
            (out_dir / "edit.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
            self.user_interaction.display_outputs("编辑结果", written)
            return written
        except Exception as e:
            logger.exception(f"编辑过程中发生错误: {e}")
            raise

    def run_gradcheck(self, module: str = "all", trials: int = 20) -> GradCheckReport:
        self.user_interaction.show_banner("gradcheck", f"模块 {module}，{trials} 次试验，float64")
        report = run_gradcheck(module, trials, self.seed)
        self.user_interaction.display_gradcheck(report)
        if not report.passed:
            names = sorted({r.name for r in report.failures})
            raise GradCheckFailure(f"{len(report.failures)} 项梯度检查失败: {', '.join(names)}")
        return report


def orbit_from(template: CameraView, count: int) -> List[CameraView]:
    """以 template 所在的相机环（半径与仰角）为轨道，从其方位角开始均匀取 count 个视角。"""
    x, y, z = template.position
    radius = float(np.linalg.norm(template.position))
    elevation = math.asin(z / radius)
    return orbit_views(template, radius, elevation, count, start_azimuth=math.atan2(y, x))


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"无法序列化 {type(value).__name__}")
