# sceneslots_core/trainer.py
# 由粗到细的渐进式训练：学习率调度、Adam、局部性约束调度、图块采样与检查点

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import image_io
from . import rng as rng_lib
from .checkpoint import (
    DISC_PREFIX, EXTRACTOR_PREFIX, OPTIM_PREFIX, PARAM_PREFIX, Checkpoint, checkpoint_save,
)
from .config_manager import ConfigManager, TrainConfig
from .losses import (
    Discriminator, FeatureExtractor, LossParts, LossWeights, discriminator_loss,
    generator_adversarial_term, perceptual_loss, recon_loss, total_loss,
)
from .nets import Module
from .parallel import ExecutionStrategy, SequentialStrategy
from .renderer import VolumeRenderer
from .run_state import RunState
from .scene_model import SceneModel
from .scenegen import SceneDataset, SceneRecord
from .tensor import NonFiniteError, Tensor, assert_finite, backward, bilinear_resize, current_tape, no_grad

logger = logging.getLogger(__name__)

COARSE = "coarse"
FINE = "fine"


# --- 调度 ---

def resolve_periods(train: TrainConfig) -> Tuple[int, int]:
    """warmup 与衰减周期；配置为 0 时按总步数等比例缩放（1/1200 与 1/6）。"""
    total = train.coarse_steps + train.fine_steps
    warmup = train.warmup_steps if train.warmup_steps > 0 else total // 1200
    period = train.decay_period if train.decay_period > 0 else max(1, total // 6)
    return warmup, period


def lr_at(step: int, base: float, warmup: int, period: int, max_halvings: int = 3) -> float:
    """线性 warmup 到 base，之后每 period 步减半，最多减半 max_halvings 次。"""
    if step < 0:
        raise ValueError(f"步数必须 >= 0，得到 {step}")
    if warmup > 0 and step < warmup:
        return base * step / warmup
    halvings = min(step // period, max_halvings)
    return base * 0.5 ** halvings


@dataclass
class StageSchedule:
    stage: str
    box_active: bool
    percept_on: bool
    adv_on: bool
    lr: float


def schedule_for(step: int, train: TrainConfig) -> StageSchedule:
    total = train.coarse_steps + train.fine_steps
    warmup, period = resolve_periods(train)
    onset = int(round(train.loss_onset_fraction * total))
    box_steps = int(round(train.box_fraction * train.coarse_steps))
    percept_on = step >= onset and train.lambda_percept > 0
    return StageSchedule(
        stage=COARSE if step < train.coarse_steps else FINE,
        box_active=step < box_steps,
        percept_on=percept_on,
        adv_on=train.adversarial and step >= onset,
        lr=lr_at(step, train.lr, warmup, period, train.max_halvings),
    )


# --- 优化器 ---

class Adam:
    """
    带偏差修正的 Adam：
    m ← β1·m + (1−β1)·g，v ← β2·v + (1−β2)·g²，
    p ← p − lr·m̂ / (√v̂ + ε)。
    """
    def __init__(self, module: Module, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(module.named_parameters())
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"m/{name}": value for name, value in self.m.items()}
        arrays.update({f"v/{name}": value for name, value in self.v.items()})
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params.items():
            self.m[name] = np.asarray(arrays[f"m/{name}"], dtype=p.data.dtype).copy()
            self.v[name] = np.asarray(arrays[f"v/{name}"], dtype=p.data.dtype).copy()
        self.t = int(t)

    def snapshot(self):
        return self.t, {k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()}

    def restore(self, snapshot) -> None:
        self.t, self.m, self.v = snapshot[0], snapshot[1], snapshot[2]


def grad_norm(module: Module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


# --- 训练器 ---

@dataclass
class StepMetrics:
    step: int
    stage: str
    scene: int
    loss: float
    recon: float
    percept: Optional[float]
    adv: Optional[float]
    disc_loss: Optional[float]
    r1: Optional[float]
    lr: float
    grad_norm: float
    box_active: bool
    skipped: bool
    slot_similarity: float

    def as_record(self) -> Dict:
        record = asdict(self)
        record["event"] = "step"
        return record


class Trainer:
    """
    训练循环的唯一写者：持有模型、判别器、两套 Adam 状态与当前步数。
    所有随机性由 (种子, 用途, 步数) 派生，因此从检查点续训可逐位复现。
    """
    def __init__(self, config: ConfigManager, dataset: SceneDataset, seed: Optional[int] = None,
                 strategy: Optional[ExecutionStrategy] = None):
        if len(dataset) == 0:
            raise ValueError("训练数据集为空")
        self.config = config
        self.train_cfg = config.train
        self.dataset = dataset
        self.seed = config.runtime.seed if seed is None else seed
        self.model = SceneModel(config.model, self.seed)
        self.extractor = FeatureExtractor(config.model.extractor_channels, self.seed)
        self.optimizer = Adam(self.model, tuple(self.train_cfg.betas), self.train_cfg.adam_eps)
        self.discriminator: Optional[Discriminator] = None
        self.disc_optimizer: Optional[Adam] = None
        if self.train_cfg.adversarial:
            self.discriminator = Discriminator(self.train_cfg.coarse_resolution,
                                               rng_lib.generator(self.seed, "init", "discriminator"),
                                               config.model.disc_channels)
            self.disc_optimizer = Adam(self.discriminator, tuple(self.train_cfg.disc_betas), self.train_cfg.adam_eps)
        self.renderer = VolumeRenderer(strategy or SequentialStrategy(), config.runtime.chunk_size, self.seed)
        self.weights = LossWeights(self.train_cfg.lambda_percept, self.train_cfg.lambda_adv, self.train_cfg.lambda_r1)
        self.step = 0
        self.disc_steps = 0
        logger.info(f"Trainer 初始化完成：{len(dataset)} 个场景，种子 {self.seed}，"
                    f"共 {self.total_steps} 步 (粗 {self.train_cfg.coarse_steps} / 细 {self.train_cfg.fine_steps})")

    @property
    def total_steps(self) -> int:
        return self.train_cfg.coarse_steps + self.train_cfg.fine_steps

    def schedule(self, step: int) -> StageSchedule:
        return schedule_for(step, self.train_cfg)

    def scene_index(self, step: int) -> int:
        return int(rng_lib.generator(self.seed, "scene-order", step).integers(len(self.dataset)))

    def patch_origin(self, step: int, view: int, resolution: int) -> Tuple[int, int]:
        limit = resolution - self.train_cfg.patch_size + 1
        top, left = rng_lib.generator(self.seed, "patch", step, view).integers(0, limit, size=2)
        return int(top), int(left)

    def _references(self, record: SceneRecord) -> List[Tensor]:
        full = self.train_cfg.full_resolution
        return [bilinear_resize(Tensor(record.images[v]), full, full) for v in range(self.train_cfg.num_views)]

    def render_views(self, record: SceneRecord, step: int, schedule: StageSchedule) -> Tuple[List[Tensor], List[Tensor], float]:
        """编码第 0 个视角并渲染所有监督视角；返回 (渲染图, 参考图, 槽相似度)。"""
        train = self.train_cfg
        slots = self.model.encode(Tensor(record.images[0]), rng_lib.derive_seed(self.seed, "slots", step))
        input_view = record.views[0]
        box = self.model.locality_box(input_view, train.box_coverage, active=schedule.box_active)
        scene = self.model.scene_fields(slots, input_view, box=box)
        references = self._references(record)
        renders, targets = [], []
        for v in range(train.num_views):
            if schedule.stage == COARSE:
                size = train.coarse_resolution
                view = record.views[v].scaled(size, size)
                renders.append(self.renderer.render_image(scene, view, train.coarse_samples, step, train.jitter))
                targets.append(bilinear_resize(references[v], size, size).detach())
            else:
                full, size = train.full_resolution, train.patch_size
                view = record.views[v].scaled(full, full)
                top, left = self.patch_origin(step, v, full)
                renders.append(self.renderer.render_patch(scene, view, top, left, size, train.fine_samples, step, train.jitter))
                targets.append(Tensor(references[v].data[:, top:top + size, left:left + size]))
        return renders, targets, self.model.encoder.last_similarity

    def _finite_grads(self, module: Module) -> bool:
        return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in module.parameters())

    def train_step(self, step: Optional[int] = None) -> StepMetrics:
        step = self.step if step is None else step
        schedule = self.schedule(step)
        index = self.scene_index(step)
        record = self.dataset[index]
        renders, targets, similarity = self.render_views(record, step, schedule)

        n = float(len(renders))
        recon = sum((recon_loss(r, t) for r, t in zip(renders, targets)), Tensor(0.0)) / n
        parts = LossParts(recon=recon)
        if schedule.percept_on:
            parts.percept = sum((perceptual_loss(r, t, self.extractor) for r, t in zip(renders, targets)), Tensor(0.0)) / n
        if schedule.adv_on and self.discriminator is not None:
            parts.adv = generator_adversarial_term(self.discriminator, renders)
        loss = total_loss(parts, self.weights)

        self.model.zero_grad()
        if any(p.grad is not None for p in self.model.parameters()):
            raise RuntimeError("反向传播前梯度未清零")
        skipped = False
        norm = float("nan")
        try:
            assert_finite(loss, "训练损失")
            backward(loss)
            if not self._finite_grads(self.model):
                raise NonFiniteError("模型梯度含非有限值")
            norm = grad_norm(self.model)
            params_before = self.model.state_dict()
            optimizer_before = self.optimizer.snapshot()
            self.optimizer.step(schedule.lr)
            if not all(np.all(np.isfinite(p.data)) for p in self.model.parameters()):
                self.model.load_state_dict(params_before)
                self.optimizer.restore(optimizer_before)
                raise NonFiniteError("参数更新后出现非有限值，已恢复更新前的参数")
        except NonFiniteError as e:
            skipped = True
            current_tape().clear()
            self.model.zero_grad()
            logger.warning(f"step {step}: {e}，跳过本步更新")

        disc_value, r1_value = None, None
        if schedule.adv_on and self.discriminator is not None and not skipped:
            disc_value, r1_value = self._discriminator_step(renders, targets, schedule)

        self.step = step + 1
        floats = parts.as_floats()
        metrics = StepMetrics(
            step=step, stage=schedule.stage, scene=index, loss=float(loss.item()),
            recon=floats["recon"], percept=floats.get("percept"), adv=floats.get("adv"),
            disc_loss=disc_value, r1=r1_value, lr=schedule.lr, grad_norm=norm,
            box_active=schedule.box_active, skipped=skipped, slot_similarity=similarity,
        )
        logger.debug(f"step {step} [{schedule.stage}] loss={metrics.loss:.6f} recon={metrics.recon:.6f} lr={schedule.lr:.2e}")
        return metrics

    def _discriminator_step(self, renders: List[Tensor], targets: List[Tensor], schedule: StageSchedule) -> Tuple[float, float]:
        """惰性 R1：每 r1_interval 次判别器更新计算一次惩罚，并乘以间隔补偿。"""
        interval = self.train_cfg.r1_interval
        r1_scale = float(interval) if self.disc_steps % interval == 0 else 0.0
        self.discriminator.zero_grad()
        result = discriminator_loss(self.discriminator, targets, [r.detach() for r in renders],
                                    self.weights.r1, r1_scale=r1_scale)
        try:
            assert_finite(result.total, "判别器损失")
            backward(result.total)
            if not self._finite_grads(self.discriminator):
                raise NonFiniteError("判别器梯度含非有限值")
            self.disc_optimizer.step(self.train_cfg.disc_lr)
        except NonFiniteError as e:
            self.discriminator.zero_grad()
            logger.warning(f"判别器更新跳过: {e}")
        self.disc_steps += 1
        return float(result.total.item()), float(result.r1.item())

    # --- 检查点 ---

    def to_checkpoint(self) -> Checkpoint:
        checkpoint = Checkpoint(
            digest=self.config.model_digest(),
            metadata={
                "step": self.step,
                "stage": COARSE if self.step < self.train_cfg.coarse_steps else FINE,
                "seed": self.seed,
                "rng": {"scheme": "counter", "seed": self.seed, "step": self.step},
                "optimizer_t": self.optimizer.t,
                "disc_optimizer_t": self.disc_optimizer.t if self.disc_optimizer else 0,
                "disc_steps": self.disc_steps,
                "precision": self.config.runtime.precision,
            },
        )
        checkpoint.add_group(PARAM_PREFIX, self.model.state_dict())
        checkpoint.add_group(OPTIM_PREFIX + "model/", self.optimizer.state_arrays())
        checkpoint.add_group(EXTRACTOR_PREFIX, self.extractor.state_dict())
        if self.discriminator is not None:
            checkpoint.add_group(DISC_PREFIX, self.discriminator.state_dict())
            checkpoint.add_group(OPTIM_PREFIX + "disc/", self.disc_optimizer.state_arrays())
        return checkpoint

    def load_checkpoint(self, checkpoint: Checkpoint) -> None:
        meta = checkpoint.metadata
        self.model.load_state_dict(checkpoint.parameters())
        self.optimizer.load_state_arrays(checkpoint.group(OPTIM_PREFIX + "model/"), meta.get("optimizer_t", 0))
        extractor_state = checkpoint.group(EXTRACTOR_PREFIX)
        if extractor_state:
            self.extractor.load_state_dict(extractor_state)
        if self.discriminator is not None:
            disc_state = checkpoint.group(DISC_PREFIX)
            if disc_state:
                self.discriminator.load_state_dict(disc_state)
                self.disc_optimizer.load_state_arrays(checkpoint.group(OPTIM_PREFIX + "disc/"), meta.get("disc_optimizer_t", 0))
        self.step = int(meta.get("step", 0))
        self.disc_steps = int(meta.get("disc_steps", 0))
        logger.info(f"已从检查点恢复训练状态：step={self.step}")

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, value in self.model.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()


# --- 主循环 ---

@dataclass
class RunResult:
    final_step: int
    checksum: str
    metrics: List[StepMetrics]
    final_checkpoint: Optional[str] = None


def write_snapshot(trainer: Trainer, run_state: RunState, step: int) -> None:
    """不记录计算图地渲染固定场景的所有视角，写入工作区。"""
    record = trainer.dataset[0]
    train = trainer.train_cfg
    with no_grad():
        slots = trainer.model.encode(Tensor(record.images[0]), rng_lib.derive_seed(trainer.seed, "snapshot"))
        scene = trainer.model.scene_fields(slots, record.views[0])
        out_dir = run_state.snapshot_dir(step)
        for v, view in enumerate(record.views):
            size = train.coarse_resolution
            rgb, _, _ = trainer.renderer.render_maps(scene, view.scaled(size, size), train.coarse_samples)
            image_io.write_rgb(out_dir / f"view_{v}.png", rgb)
    run_state.append_log({"event": "snapshot", "step": step, "path": str(out_dir)})


def progressive_run(trainer: Trainer, run_state: Optional[RunState] = None,
                    on_step: Optional[Callable[[StepMetrics], None]] = None,
                    keep_metrics: bool = True) -> RunResult:
    """
    从 trainer.step 开始跑完粗阶段与细阶段。fine_steps = 0 时只有粗阶段。
    每个阶段开始时写 stage_start 事件；按配置周期写检查点与快照。
    """
    train = trainer.train_cfg
    total = trainer.total_steps
    metrics: List[StepMetrics] = []
    final_path = None
    start = trainer.step
    logger.info(f"开始渐进式训练：step {start} -> {total}")
    began = time.time()
    for step in range(start, total):
        if step == 0 or step == train.coarse_steps:
            stage = trainer.schedule(step).stage
            if run_state is not None:
                run_state.append_log({"event": "stage_start", "stage": stage, "step": step})
            logger.info(f"阶段 {stage} 开始于 step {step}")
        elif step == start and run_state is not None:
            run_state.append_log({"event": "resume", "stage": trainer.schedule(step).stage, "step": step})
        result = trainer.train_step(step)
        if keep_metrics:
            metrics.append(result)
        if on_step is not None:
            on_step(result)
        if run_state is not None:
            run_state.append_log(result.as_record())
        done = step + 1
        if run_state is not None:
            if done == train.coarse_steps:
                path = checkpoint_save(run_state.checkpoint_path(RunState.COARSE_FINAL_CHECKPOINT), trainer.to_checkpoint())
                run_state.append_log({"event": "checkpoint", "step": done, "path": str(path)})
            elif train.checkpoint_every > 0 and done % train.checkpoint_every == 0 and done < total:
                path = checkpoint_save(run_state.periodic_checkpoint_path(done), trainer.to_checkpoint())
                run_state.append_log({"event": "checkpoint", "step": done, "path": str(path)})
            if train.snapshot_every > 0 and done % train.snapshot_every == 0:
                write_snapshot(trainer, run_state, done)
    if run_state is not None:
        final_path = str(checkpoint_save(run_state.checkpoint_path(RunState.FINAL_CHECKPOINT), trainer.to_checkpoint()))
        run_state.append_log({"event": "checkpoint", "step": trainer.step, "path": final_path})
    checksum = trainer.parameter_checksum()
    logger.info(f"训练结束：step={trainer.step}，耗时 {time.time() - began:.1f}s，参数校验和 {checksum[:16]}")
    return RunResult(final_step=trainer.step, checksum=checksum, metrics=metrics, final_checkpoint=final_path)
