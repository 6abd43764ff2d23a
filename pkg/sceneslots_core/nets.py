# 可学习的网络积木：模块/参数注册表、线性映射、GRU、残差 MLP、卷积层与位置编码

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    Parameter, ShapeError, Tensor, as_tensor, concat, conv2d, cos,
    relu, sigmoid, sin, swap_last, tanh,
)

logger = logging.getLogger(__name__)


# --- 初始化 ---

def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# --- 模块基类 ---

class Module:
    """
    所有网络的基类。赋值给属性的 Parameter 与子 Module 会被自动登记，
    named_parameters() 按登记顺序给出带层级前缀的唯一名字（检查点依赖这些名字）。
    """
    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if "_parameters" not in self.__dict__:
            raise RuntimeError(f"{type(self).__name__} 在调用 Module.__init__ 之前设置了属性 '{name}'")
        self._parameters.pop(name, None)
        self._modules.pop(name, None)
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} 未实现 forward")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        seen = set()
        for module_name, module in self.named_modules(prefix):
            for name, param in module._parameters.items():
                if id(param) in seen:
                    continue
                seen.add(id(param))
                yield (f"{module_name}.{name}" if module_name else name), param

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"参数名不匹配。缺失: {missing}；多余: {unexpected}")
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"参数 '{name}' 形状不一致: 期望 {param.shape}，得到 {value.shape}")
            param.data = value.astype(param.data.dtype, copy=True)
        logger.debug(f"{type(self).__name__} 已载入 {len(own) - len(missing)} 个参数张量")


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]


def parameter_registry(module: Module) -> "OrderedDict[str, Parameter]":
    """返回模块的命名参数表；名字重复时直接报错。"""
    registry: "OrderedDict[str, Parameter]" = OrderedDict()
    for name, param in module.named_parameters():
        if name in registry:
            raise ValueError(f"参数名重复: {name}")
        registry[name] = param
    return registry


# --- 线性映射 ---

class LinearMap(Module):
    """y = x·Wᵀ + b，W 形状 [out, in]。"""
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, init: str = "fan_in"):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if init == "xavier":
            weight = xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim)
            b = np.zeros(out_dim)
        elif init == "fan_in":
            weight = fan_in_uniform(rng, (out_dim, in_dim), in_dim)
            b = fan_in_uniform(rng, (out_dim,), in_dim)
        else:
            raise ValueError(f"未知的初始化方式: {init}")
        self.weight = Parameter(weight)
        self.bias = Parameter(b) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"LinearMap 期望最后一维为 {self.in_dim}，得到形状 {x.shape}")
        out = x @ swap_last(self.weight)
        return out + self.bias if self.bias is not None else out

    def apply_split(self, parts: Sequence[Tensor]) -> Tensor:
        """
        等价于 forward(concat(parts, -1))，但各部分先各自乘以对应的权重列块再相加，
        因而各部分只需在前导维上可广播（例如 [S,33] 的编码与 [K,1,D] 的隐变量）。
        """
        widths = [as_tensor(p).shape[-1] for p in parts]
        if sum(widths) != self.in_dim:
            raise ShapeError(f"LinearMap 输入宽度之和 {sum(widths)} 与 in_dim={self.in_dim} 不一致")
        out: Optional[Tensor] = None
        start = 0
        for part, width in zip(parts, widths):
            block = self.weight[:, start:start + width]
            term = as_tensor(part) @ swap_last(block)
            out = term if out is None else out + term
            start += width
        return out + self.bias if self.bias is not None else out


def linear_apply(m: LinearMap, x: Tensor) -> Tensor:
    return m(x)


# --- GRU ---

class GruCell(Module):
    """
    r = σ(W_r·[x,h])，u = σ(W_u·[x,h])，ĥ = tanh(W_c·[x, r⊙h])，h' = (1−u)⊙h + u⊙ĥ。
    """
    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.reset_gate = LinearMap(2 * dim, dim, rng)
        self.update_gate = LinearMap(2 * dim, dim, rng)
        self.candidate = LinearMap(2 * dim, dim, rng)

    def forward(self, state: Tensor, inputs: Tensor) -> Tensor:
        if state.shape != inputs.shape:
            raise ShapeError(f"GRU 状态与输入形状不一致: {state.shape} 与 {inputs.shape}")
        if state.shape[-1] != self.dim:
            raise ShapeError(f"GRU 期望最后一维为 {self.dim}，得到 {state.shape}")
        r = sigmoid(self.reset_gate.apply_split([inputs, state]))
        u = sigmoid(self.update_gate.apply_split([inputs, state]))
        candidate = tanh(self.candidate.apply_split([inputs, r * state]))
        return (1.0 - u) * state + u * candidate


def gru_step(cell: GruCell, state: Tensor, inputs: Tensor) -> Tensor:
    return cell(state, inputs)


class SlotMlp(Module):
    """残差更新：slots + W₂·relu(W₁·slots)。"""
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = LinearMap(dim, hidden, rng)
        self.fc2 = LinearMap(hidden, dim, rng)

    def forward(self, slots: Tensor) -> Tensor:
        return slots + self.fc2(relu(self.fc1(slots)))


class Conv2dLayer(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        fan_in = in_channels * 9
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = Parameter(fan_in_uniform(rng, (out_channels, in_channels, 3, 3), fan_in))
        self.bias = Parameter(fan_in_uniform(rng, (out_channels,), fan_in))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


# --- 位置编码 ---

class PositionalEncoder:
    """
    γ(p) = [p, sin(2⁰πp), cos(2⁰πp), sin(2¹πp), cos(2¹πp), …]，每个块 3 维。
    第 k 个频率的 sin 块位于 3+6k，cos 块位于 3+6k+3。
    """
    def __init__(self, num_frequencies: int = 5, include_input: bool = True):
        if num_frequencies < 0:
            raise ValueError(f"频率数不能为负: {num_frequencies}")
        self.num_frequencies = num_frequencies
        self.include_input = include_input

    @property
    def out_dim(self) -> int:
        return self.num_frequencies * 2 * 3 + (3 if self.include_input else 0)

    def __call__(self, points: Tensor) -> Tensor:
        points = as_tensor(points)
        if points.shape[-1] != 3:
            raise ShapeError(f"位置编码需要最后一维为 3，得到 {points.shape}")
        pieces = [points] if self.include_input else []
        for k in range(self.num_frequencies):
            scaled = points * float((2.0 ** k) * math.pi)
            pieces.append(sin(scaled))
            pieces.append(cos(scaled))
        return concat(pieces, axis=-1)


def positional_encode(points: Tensor, num_frequencies: int = 5) -> Tensor:
    return PositionalEncoder(num_frequencies)(points)
