# sceneslots_core/gradcheck.py
# 有限差分梯度检查：逐算子与完整的 编码→解码→合成→积分→损失 流程

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import rng as rng_lib
from .camera import CameraView, ring_pose
from .config_manager import ModelConfig
from .fields import RadianceSampleBatch
from .losses import adv_f, recon_loss
from .renderer import SampleGrid, VolumeRenderer, compose, integrate
from .scene_model import SceneModel
from .tensor import (
    Tensor, amax, bilinear_resize, concat, conv2d, cos, cumsum, current_tape, div, exp, grad, leaky_relu, log, matmul,
    mean, no_grad, power, precision, relu, sigmoid, sin, softmax, softplus, tanh, tsum,
)

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
ERROR_FLOOR = 1e-5
DEFAULT_TRIALS = 20
SUITES = ("tensor", "pipeline")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a − n| / max(|a|, |n|, 1e-5)。"""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    return np.abs(analytic - numeric) / scale


def central_difference(loss_fn: Callable[[], float], array: np.ndarray, index: tuple, h: float = STEP) -> float:
    """就地扰动 array[index]，返回 (f(x+h) − f(x−h)) / 2h，并恢复原值。"""
    original = array[index]
    array[index] = original + h
    upper = loss_fn()
    array[index] = original - h
    lower = loss_fn()
    array[index] = original
    return (upper - lower) / (2.0 * h)


@dataclass
class CheckResult:
    name: str
    trial: int
    max_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def summary(self) -> Dict[str, Dict[str, float]]:
        """按检查项汇总：试验次数、失败次数、最大相对误差。"""
        table: Dict[str, Dict[str, float]] = {}
        for r in self.results:
            row = table.setdefault(r.name, {"trials": 0, "failures": 0, "max_error": 0.0})
            row["trials"] += 1
            row["failures"] += int(not r.passed)
            row["max_error"] = max(row["max_error"], r.max_error)
        return table


def check_entries(name: str, trial: int, loss_fn: Callable[[], float], arrays: Sequence[np.ndarray],
                  analytic: Sequence[np.ndarray], indices: Optional[Sequence[Sequence[tuple]]] = None) -> CheckResult:
    """
    对 arrays 中选定的元素比较解析梯度与中心差分；超出容差的元素用 h/10 复查一次。
    indices 为 None 时检查全部元素。
    """
    worst, checked = 0.0, 0
    for k, (array, g) in enumerate(zip(arrays, analytic)):
        chosen = indices[k] if indices is not None else list(np.ndindex(array.shape))
        for index in chosen:
            numeric = central_difference(loss_fn, array, index)
            error = float(relative_error(g[index], numeric))
            if error >= TOLERANCE:
                numeric = central_difference(loss_fn, array, index, STEP / 10.0)
                error = min(error, float(relative_error(g[index], numeric)))
            worst = max(worst, error)
            checked += 1
    result = CheckResult(name=name, trial=trial, max_error=worst, checked=checked, passed=worst < TOLERANCE)
    if not result.passed:
        logger.warning(f"梯度检查失败: {name} (试验 {trial}) 最大相对误差 {worst:.3e}")
    return result


# --- 逐算子检查 ---

@dataclass
class OpCase:
    """make 生成输入数组；fn 把输入张量映射为任意形状的输出。"""
    name: str
    make: Callable[[np.random.Generator], List[np.ndarray]]
    fn: Callable[[Sequence[Tensor]], Tensor]


def _away_from_zero(g: np.random.Generator, shape) -> np.ndarray:
    return g.choice([-1.0, 1.0], size=shape) * g.uniform(0.1, 1.0, size=shape)


def _positive(g: np.random.Generator, shape) -> np.ndarray:
    return g.uniform(0.5, 2.0, size=shape)


def _r1_style(x: Sequence[Tensor]) -> Tensor:
    inner = tsum(tanh(matmul(x[0], x[1])))
    (g,) = grad(inner, [x[0]], create_graph=True)
    return tsum(g * g)


def _compose_integrate(x: Sequence[Tensor]) -> Tensor:
    density, color = x
    sigma, rgb, _ = compose(RadianceSampleBatch(color=sigmoid(color), density=density))
    depths = np.linspace(0.5, 2.0, density.shape[-1])[None, :].repeat(density.shape[1], axis=0)
    deltas = np.full_like(depths, depths[0, 1] - depths[0, 0])
    return integrate(sigma, rgb, SampleGrid(depths, deltas)).rgb


OP_CASES: List[OpCase] = [
    OpCase("add_broadcast", lambda g: [g.normal(size=(3, 1)), g.normal(size=(1, 4))], lambda x: x[0] + x[1]),
    OpCase("sub", lambda g: [g.normal(size=(3, 4)), g.normal(size=(4,))], lambda x: x[0] - x[1]),
    OpCase("mul_broadcast", lambda g: [g.normal(size=(2, 3, 4)), g.normal(size=(3, 1))], lambda x: x[0] * x[1]),
    OpCase("div", lambda g: [g.normal(size=(3, 4)), _away_from_zero(g, (3, 4))], lambda x: div(x[0], x[1])),
    OpCase("power", lambda g: [_positive(g, (5,))], lambda x: power(x[0], 1.7)),
    OpCase("exp", lambda g: [g.normal(size=(6,))], lambda x: exp(x[0])),
    OpCase("log", lambda g: [_positive(g, (6,))], lambda x: log(x[0])),
    OpCase("relu", lambda g: [_away_from_zero(g, (6,))], lambda x: relu(x[0])),
    OpCase("leaky_relu", lambda g: [_away_from_zero(g, (6,))], lambda x: leaky_relu(x[0], 0.2)),
    OpCase("sigmoid", lambda g: [g.normal(size=(6,))], lambda x: sigmoid(x[0])),
    OpCase("tanh", lambda g: [g.normal(size=(6,))], lambda x: tanh(x[0])),
    OpCase("softplus", lambda g: [g.normal(size=(6,)) * 3.0], lambda x: softplus(x[0])),
    OpCase("sin_cos", lambda g: [g.normal(size=(6,))], lambda x: sin(x[0]) * cos(x[0])),
    OpCase("sum_axis", lambda g: [g.normal(size=(3, 4))], lambda x: tsum(x[0], axis=1)),
    OpCase("mean_keepdims", lambda g: [g.normal(size=(3, 4))], lambda x: mean(x[0], axis=0, keepdims=True)),
    OpCase("max_axis", lambda g: [g.permutation(12).reshape(3, 4) + 0.1 * g.normal(size=(3, 4))],
           lambda x: amax(x[0], axis=1)),
    OpCase("cumsum_reverse", lambda g: [g.normal(size=(2, 5))], lambda x: cumsum(x[0], axis=-1, reverse=True)),
    OpCase("matmul", lambda g: [g.normal(size=(3, 4)), g.normal(size=(4, 2))], lambda x: matmul(x[0], x[1])),
    OpCase("matmul_batched", lambda g: [g.normal(size=(2, 3, 4)), g.normal(size=(4, 2))], lambda x: matmul(x[0], x[1])),
    OpCase("softmax", lambda g: [g.normal(size=(3, 5))], lambda x: softmax(x[0], axis=-1)),
    OpCase("softmax_axis0", lambda g: [g.normal(size=(4, 3))], lambda x: softmax(x[0], axis=0)),
    OpCase("concat_getitem", lambda g: [g.normal(size=(2, 3)), g.normal(size=(1, 3))],
           lambda x: concat([x[0], x[1]], axis=0)[1:, ::2]),
    OpCase("reshape_transpose", lambda g: [g.normal(size=(2, 6))], lambda x: x[0].reshape(3, 4).T * 2.0),
    OpCase("conv2d_stride1", lambda g: [g.normal(size=(2, 4, 4)), g.normal(size=(3, 2, 3, 3)), g.normal(size=(3,))],
           lambda x: conv2d(x[0], x[1], x[2], stride=1)),
    OpCase("conv2d_stride2", lambda g: [g.normal(size=(1, 5, 4)), g.normal(size=(2, 1, 3, 3))],
           lambda x: conv2d(x[0], x[1], stride=2)),
    OpCase("bilinear_up", lambda g: [g.normal(size=(2, 3, 2))], lambda x: bilinear_resize(x[0], 5, 4)),
    OpCase("bilinear_down", lambda g: [g.normal(size=(1, 6, 6))], lambda x: bilinear_resize(x[0], 3, 2)),
    OpCase("recon_loss", lambda g: [g.uniform(size=(3, 4, 4)), g.uniform(size=(3, 4, 4))],
           lambda x: recon_loss(x[0], x[1])),
    OpCase("adv_f", lambda g: [g.normal(size=(5,)) * 4.0], lambda x: adv_f(x[0])),
    OpCase("double_backward", lambda g: [g.normal(size=(2, 3)), g.normal(size=(3, 2))], _r1_style),
    OpCase("compose_integrate", lambda g: [_positive(g, (3, 2, 4)), g.normal(size=(3, 2, 4, 3))], _compose_integrate),
]


def check_op(case: OpCase, trial: int, seed: int = 0) -> CheckResult:
    g = rng_lib.generator(seed, "gradcheck", case.name, trial)
    arrays = [np.asarray(a, dtype=np.float64) for a in case.make(g)]
    # 随机投影把任意形状输出化为标量
    with no_grad():
        shape = case.fn([Tensor(a) for a in arrays]).shape
    projection = Tensor(g.normal(size=shape))

    def scalar(inputs: Sequence[Tensor]) -> Tensor:
        return tsum(case.fn(inputs) * projection)

    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = [t.data for t in grad(scalar(inputs), inputs)]
    current_tape().clear()

    def loss_fn() -> float:
        # double_backward 需要在前向中记录计算图
        value = float(scalar([Tensor(a, requires_grad=True) for a in arrays]).item())
        current_tape().clear()
        return value

    return check_entries(case.name, trial, loss_fn, arrays, analytic)


def tensor_suite(trials: int = DEFAULT_TRIALS, seed: int = 0, cases: Optional[Sequence[OpCase]] = None) -> GradCheckReport:
    report = GradCheckReport()
    with precision("float64"):
        for case in cases or OP_CASES:
            for trial in range(trials):
                report.results.append(check_op(case, trial, seed))
    logger.info(f"算子梯度检查: {len(report.results)} 项，失败 {len(report.failures)} 项")
    return report


# --- 完整流程检查 ---

MICRO_CONFIG = ModelConfig(
    num_slots=2, slot_dim=4, encoder_channels=3, encoder_variant="compact", encoder_resolution=4,
    attention_iters=2, mlp_hidden=6, decoder_width=6, fg_layers=3, bg_layers=2, skip_layer=1,
    num_frequencies=2, scene_scale=0.5,
)
MICRO_RESOLUTION = 4
MICRO_SAMPLES = 4


def micro_view() -> CameraView:
    pose = ring_pose(3.0, np.radians(30.0), np.radians(20.0))
    size = MICRO_RESOLUTION
    return CameraView(focal=1.2 * size, cx=size / 2, cy=size / 2, width=size, height=size,
                      cam_to_world=pose, near=1.5, far=4.5)


def pipeline_loss(model: SceneModel, image: np.ndarray, reference: np.ndarray, view: CameraView,
                  slot_seed: int, renderer: Optional[VolumeRenderer] = None) -> Tensor:
    """编码输入图像、在 view 上渲染并与 reference 比较的重建损失。"""
    renderer = renderer or VolumeRenderer()
    slots = model.encode(Tensor(image), slot_seed)
    box = model.locality_box(view, active=False)
    rendered = renderer.render_image(model.scene_fields(slots, view, box=box), view, MICRO_SAMPLES)
    return recon_loss(rendered, Tensor(reference))


def check_pipeline(trial: int, seed: int = 0, entries_per_parameter: int = 3,
                   config: ModelConfig = MICRO_CONFIG) -> CheckResult:
    """4×4 像素、每条光线 4 个采样的微型场景；每个参数张量随机抽查若干元素。"""
    g = rng_lib.generator(seed, "gradcheck", "pipeline", trial)
    model = SceneModel(config, seed=rng_lib.derive_seed(seed, "pipeline-model", trial))
    view = micro_view()
    image = g.uniform(size=(3, MICRO_RESOLUTION, MICRO_RESOLUTION))
    reference = g.uniform(size=(3, MICRO_RESOLUTION, MICRO_RESOLUTION))
    slot_seed = rng_lib.derive_seed(seed, "pipeline-slots", trial)

    names, params = zip(*model.named_parameters())
    model.zero_grad()
    analytic = grad(pipeline_loss(model, image, reference, view, slot_seed), list(params))
    current_tape().clear()

    def loss_fn() -> float:
        with no_grad():
            return float(pipeline_loss(model, image, reference, view, slot_seed).item())

    arrays = [p.data for p in params]
    indices = []
    for p in params:
        flat = g.choice(p.data.size, size=min(entries_per_parameter, p.data.size), replace=False)
        indices.append([np.unravel_index(int(i), p.data.shape) for i in flat])
    logger.debug(f"流程梯度检查 (试验 {trial}): {len(names)} 个参数张量")
    return check_entries("pipeline", trial, loss_fn, arrays, [a.data for a in analytic], indices)


def pipeline_suite(trials: int = DEFAULT_TRIALS, seed: int = 0) -> GradCheckReport:
    report = GradCheckReport()
    with precision("float64"):
        for trial in range(trials):
            report.results.append(check_pipeline(trial, seed))
    logger.info(f"流程梯度检查: {len(report.results)} 次试验，失败 {len(report.failures)} 次")
    return report


def run_gradcheck(module: str = "all", trials: int = DEFAULT_TRIALS, seed: int = 0) -> GradCheckReport:
    """module: all | tensor | pipeline。"""
    if module not in ("all",) + SUITES:
        raise ValueError(f"未知的梯度检查模块 '{module}'，可选: all, {', '.join(SUITES)}")
    report = GradCheckReport()
    if module in ("all", "tensor"):
        report.results.extend(tensor_suite(trials, seed).results)
    if module in ("all", "pipeline"):
        report.results.extend(pipeline_suite(trials, seed).results)
    return report
