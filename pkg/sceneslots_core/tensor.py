# 张量与反向模式自动微分核心模块
#
# 每个可微算子是一个 Function 子类：forward 在 numpy 数组上计算，
# backward 用 Tensor 运算表达伴随，因此在 create_graph=True 时可以再次求导
# （R1 梯度惩罚需要对梯度本身求导）。

import contextlib
import itertools
import logging
import threading
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


class ShapeError(ValueError):
    """张量形状不兼容。"""


class NonFiniteError(ArithmeticError):
    """张量中出现 NaN 或 Inf。"""


class GraphReleasedError(RuntimeError):
    """计算图已在之前的 backward 中释放。"""


def set_precision(name: str) -> None:
    """全局切换默认浮点精度（float32 用于训练，float64 用于梯度检查）。"""
    global _default_dtype
    if name not in _PRECISIONS:
        raise ValueError(f"不支持的精度: {name}，可选 {sorted(_PRECISIONS)}")
    _default_dtype = _PRECISIONS[name]
    logger.debug(f"默认精度切换为 {name}")


def get_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """临时切换默认精度。"""
    previous = "float64" if _default_dtype is np.float64 else "float32"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


# --- 线程私有状态：磁带与梯度开关 ---

_local = threading.local()


class TapeEntry:
    __slots__ = ("index", "function", "inputs", "output", "released")

    def __init__(self, index: int, function: "Function", inputs: Tuple["Tensor", ...], output: "Tensor"):
        self.index = index
        self.function = function
        self.inputs = inputs
        self.output = output
        self.released = False


class Tape:
    """
    按执行顺序记录可微操作。反向传播时按记录序号的逆序回放。
    磁带是线程私有的，每个训练步一条。
    """
    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._counter = itertools.count()

    def record(self, function: "Function", inputs: Tuple["Tensor", ...], output: "Tensor") -> TapeEntry:
        entry = TapeEntry(next(self._counter), function, inputs, output)
        self.entries.append(entry)
        return entry

    def clear(self) -> None:
        for entry in self.entries:
            entry.released = True
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool) -> Iterator[None]:
    previous = is_grad_enabled()
    _local.grad_enabled = bool(mode)
    try:
        yield
    finally:
        _local.grad_enabled = previous


def no_grad():
    """在该上下文内不向磁带记录任何操作。"""
    return set_grad_enabled(False)


# --- Tensor ---

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class Tensor:
    """
    稠密浮点数组，带可选梯度缓冲。

    Tensor 在构造后视为不可变：优化器只在两次训练步之间（磁带清空后）
    替换参数的 data。
    """
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None, dtype: Optional[type] = None):
        self.data: np.ndarray = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._entry: Optional[TapeEntry] = None

    # 基本属性
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() 只适用于单元素张量，当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False, create_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph, create_graph=create_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # 运算符
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor": return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False) -> "Tensor": return mean(self, axis, keepdims)
    def max(self, axis=None, keepdims: bool = False) -> "Tensor": return amax(self, axis, keepdims)
    def exp(self) -> "Tensor": return exp(self)
    def log(self) -> "Tensor": return log(self)
    def relu(self) -> "Tensor": return relu(self)
    def sigmoid(self) -> "Tensor": return sigmoid(self)
    def tanh(self) -> "Tensor": return tanh(self)


class Parameter(Tensor):
    """可学习参数：默认 requires_grad=True 的叶子张量。"""
    def __init__(self, data: ArrayLike, requires_grad: bool = True, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=_default_dtype), requires_grad=requires_grad, name=name)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"形状无法按尾轴规则广播: {a} 与 {b}") from None


def assert_finite(tensor: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(tensor.data)):
        bad = int(np.size(tensor.data) - np.count_nonzero(np.isfinite(tensor.data)))
        raise NonFiniteError(f"{what} 含有 {bad} 个非有限值 (形状 {tensor.shape})")
    return tensor


# --- Function 基类 ---

class Function:
    """
    可微操作的基类。子类实现 forward（numpy）与 backward（Tensor 运算）。
    """
    name = "function"

    def __init__(self, **params: Any):
        self.params = params
        self.inputs: Tuple[Tensor, ...] = ()
        self.output: Optional[Tensor] = None

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} 未实现 forward")

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        raise NotImplementedError(f"{type(self).__name__} 未实现 backward")

    @classmethod
    def apply(cls, *operands: Union[Tensor, ArrayLike], **params: Any) -> Tensor:
        inputs = tuple(as_tensor(x) for x in operands)
        function = cls(**params)
        out_data = function.forward(*(t.data for t in inputs))
        requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires)
        if requires:
            function.inputs = inputs
            function.output = out
            out._entry = current_tape().record(function, inputs, out)
        return out


# --- 逐元素二元算子 ---

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return sum_to(grad, a.shape), sum_to(grad, b.shape)


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return sum_to(grad, a.shape), sum_to(neg(grad), b.shape)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return sum_to(grad * b, a.shape), sum_to(grad * a, b.shape)


class Div(Function):
    """除零按 IEEE 规则产生 inf/nan 哨兵值，由 assert_finite 捕获。"""
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b

    def backward(self, grad):
        a, b = self.inputs
        return sum_to(grad / b, a.shape), sum_to(neg(grad * a) / (b * b), b.shape)


# --- 逐元素一元算子 ---

class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (neg(grad),)


class Power(Function):
    name = "power"

    def forward(self, a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.power(a, self.params["exponent"])

    def backward(self, grad):
        (a,) = self.inputs
        p = self.params["exponent"]
        if p == 1:
            return (grad,)
        return (grad * p * power(a, p - 1),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        with np.errstate(over="ignore"):
            return np.exp(a)

    def backward(self, grad):
        return (grad * self.output,)


class Log(Function):
    """log(0) = -inf，log(负数) = nan：哨兵值，不抛异常。"""
    name = "log"

    def forward(self, a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad / a,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad * Tensor((a.data > 0).astype(a.data.dtype)),)


class LeakyRelu(Function):
    name = "leaky_relu"

    def forward(self, a):
        return np.where(a > 0, a, a * self.params["slope"])

    def backward(self, grad):
        (a,) = self.inputs
        mask = np.where(a.data > 0, 1.0, self.params["slope"]).astype(a.data.dtype)
        return (grad * Tensor(mask),)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    positive = a >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
    e = np.exp(a[~positive])
    out[~positive] = e / (1.0 + e)
    return out


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        return _stable_sigmoid(a)

    def backward(self, grad):
        s = self.output
        return (grad * s * (1.0 - s),)


class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, grad):
        t = self.output
        return (grad * (1.0 - t * t),)


class Softplus(Function):
    """log(1 + exp(a))，|a| 到 1e4 都数值稳定。"""
    name = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad * sigmoid(a),)


class Sin(Function):
    name = "sin"

    def forward(self, a):
        return np.sin(a)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad * cos(a),)


class Cos(Function):
    name = "cos"

    def forward(self, a):
        return np.cos(a)

    def backward(self, grad):
        (a,) = self.inputs
        return (neg(grad * sin(a)),)


# --- 归约 ---

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"轴 {ax} 超出 {ndim} 维张量的范围")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _keepdims_shape(shape: Tuple[int, ...], axes: Tuple[int, ...]) -> Tuple[int, ...]:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.axes = _normalize_axes(self.params["axis"], a.ndim)
        return np.sum(a, axis=self.axes, keepdims=self.params["keepdims"])

    def backward(self, grad):
        (a,) = self.inputs
        g = reshape(grad, _keepdims_shape(a.shape, self.axes))
        return (broadcast_to(g, a.shape),)


class Max(Function):
    """沿轴取最大值；并列时梯度只给第一个最大元素，保证确定性。"""
    name = "max"

    def forward(self, a):
        self.axes = _normalize_axes(self.params["axis"], a.ndim)
        return np.max(a, axis=self.axes, keepdims=self.params["keepdims"])

    def backward(self, grad):
        (a,) = self.inputs
        keep = _keepdims_shape(a.shape, self.axes)
        moved = np.moveaxis(a.data, self.axes, tuple(range(a.ndim - len(self.axes), a.ndim)))
        flat = moved.reshape(moved.shape[: a.ndim - len(self.axes)] + (-1,))
        first = np.argmax(flat, axis=-1)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, first[..., None], 1.0, axis=-1)
        mask = np.moveaxis(onehot.reshape(moved.shape), tuple(range(a.ndim - len(self.axes), a.ndim)), self.axes)
        return (broadcast_to(reshape(grad, keep), a.shape) * Tensor(mask),)


class BroadcastTo(Function):
    name = "broadcast_to"

    def forward(self, a):
        _broadcast_shape(a.shape, self.params["shape"])
        return np.array(np.broadcast_to(a, self.params["shape"]))

    def backward(self, grad):
        (a,) = self.inputs
        return (sum_to(grad, a.shape),)


def _unbroadcast(arr: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if arr.shape == tuple(shape):
        return arr
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for dim, n in enumerate(shape):
        if n == 1 and arr.shape[dim] != 1:
            arr = arr.sum(axis=dim, keepdims=True)
    return arr


class SumTo(Function):
    """广播的逆：把多出的轴求和，得到目标形状。"""
    name = "sum_to"

    def forward(self, a):
        return np.array(_unbroadcast(a, tuple(self.params["shape"])))

    def backward(self, grad):
        (a,) = self.inputs
        return (broadcast_to(grad, a.shape),)


class Cumsum(Function):
    name = "cumsum"

    def forward(self, a):
        axis = self.params["axis"]
        if self.params["reverse"]:
            return np.flip(np.cumsum(np.flip(a, axis=axis), axis=axis), axis=axis).copy()
        return np.cumsum(a, axis=axis)

    def backward(self, grad):
        return (cumsum(grad, self.params["axis"], reverse=not self.params["reverse"]),)


# --- 形状操作 ---

class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        try:
            return a.reshape(self.params["shape"])
        except ValueError:
            raise ShapeError(f"无法把形状 {a.shape} 重排为 {self.params['shape']}") from None

    def backward(self, grad):
        (a,) = self.inputs
        return (reshape(grad, a.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        axes = self.params["axes"]
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad):
        inverse = tuple(np.argsort(self.axes))
        return (transpose(grad, inverse),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays):
        axis = self.params["axis"]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(f"无法沿轴 {axis} 拼接形状 {[x.shape for x in arrays]}") from None

    def backward(self, grad):
        axis = self.params["axis"] % grad.ndim
        grads, start = [], 0
        for t in self.inputs:
            index = [slice(None)] * grad.ndim
            index[axis] = slice(start, start + t.shape[axis])
            grads.append(getitem(grad, tuple(index)))
            start += t.shape[axis]
        return tuple(grads)


class GetItem(Function):
    name = "getitem"

    def forward(self, a):
        return np.array(a[self.params["index"]])

    def backward(self, grad):
        (a,) = self.inputs
        return (ScatterAdd.apply(grad, index=self.params["index"], shape=a.shape),)


class ScatterAdd(Function):
    """GetItem 的伴随：把梯度累加回原位置（重复索引会累加）。"""
    name = "scatter_add"

    def forward(self, g):
        out = np.zeros(self.params["shape"], dtype=g.dtype)
        index = self.params["index"]
        parts = index if isinstance(index, tuple) else (index,)
        if all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts):
            # 基本索引不会重复命中同一位置
            out[index] += g
        else:
            np.add.at(out, index, g)
        return out

    def backward(self, grad):
        return (getitem(grad, self.params["index"]),)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul 需要至少二维的操作数，得到 {a.shape} 与 {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul 内维不一致: {a.shape} 与 {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        return (sum_to(matmul(grad, swap_last(b)), a.shape),
                sum_to(matmul(swap_last(a), grad), b.shape))


# --- 卷积所需的 im2col / col2im（互为伴随） ---

def same_padding(size: int, stride: int) -> Tuple[int, int, int]:
    """返回 (输出尺寸, 前侧填充, 后侧填充)，输出尺寸 = ceil(size / stride)。"""
    out = -(-size // stride)
    total = max((out - 1) * stride + 3 - size, 0)
    return out, total // 2, total - total // 2


def _unfold_array(x: np.ndarray, stride: int) -> np.ndarray:
    c, h, w = x.shape
    oh, pt, pb = same_padding(h, stride)
    ow, pl, pr = same_padding(w, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    patches = np.empty((c, 3, 3, oh, ow), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            patches[:, di, dj] = xp[:, di: di + stride * (oh - 1) + 1: stride, dj: dj + stride * (ow - 1) + 1: stride]
    return np.ascontiguousarray(patches.reshape(c * 9, oh * ow).T)


def _fold_array(cols: np.ndarray, in_shape: Tuple[int, int, int], stride: int) -> np.ndarray:
    c, h, w = in_shape
    oh, pt, pb = same_padding(h, stride)
    ow, pl, pr = same_padding(w, stride)
    patches = cols.T.reshape(c, 3, 3, oh, ow)
    xp = np.zeros((c, h + pt + pb, w + pl + pr), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            xp[:, di: di + stride * (oh - 1) + 1: stride, dj: dj + stride * (ow - 1) + 1: stride] += patches[:, di, dj]
    return np.ascontiguousarray(xp[:, pt: pt + h, pl: pl + w])


class Unfold3x3(Function):
    """[C,H,W] -> [H'W', C*9]，列序为 c*9 + di*3 + dj，零填充。"""
    name = "unfold3x3"

    def forward(self, x):
        return _unfold_array(x, self.params["stride"])

    def backward(self, grad):
        (x,) = self.inputs
        return (Fold3x3.apply(grad, stride=self.params["stride"], in_shape=x.shape),)


class Fold3x3(Function):
    name = "fold3x3"

    def forward(self, cols):
        return _fold_array(cols, tuple(self.params["in_shape"]), self.params["stride"])

    def backward(self, grad):
        return (Unfold3x3.apply(grad, stride=self.params["stride"]),)


# --- 函数式接口 ---

def add(a, b) -> Tensor: return Add.apply(a, b)
def sub(a, b) -> Tensor: return Sub.apply(a, b)
def mul(a, b) -> Tensor: return Mul.apply(a, b)
def div(a, b) -> Tensor: return Div.apply(a, b)
def neg(a) -> Tensor: return Neg.apply(a)
def power(a, exponent: float) -> Tensor: return Power.apply(a, exponent=float(exponent))
def exp(a) -> Tensor: return Exp.apply(a)
def log(a) -> Tensor: return Log.apply(a)
def relu(a) -> Tensor: return Relu.apply(a)
def leaky_relu(a, slope: float = 0.2) -> Tensor: return LeakyRelu.apply(a, slope=float(slope))
def sigmoid(a) -> Tensor: return Sigmoid.apply(a)
def tanh(a) -> Tensor: return Tanh.apply(a)
def softplus(a) -> Tensor: return Softplus.apply(a)
def sin(a) -> Tensor: return Sin.apply(a)
def cos(a) -> Tensor: return Cos.apply(a)
def tsum(a, axis=None, keepdims: bool = False) -> Tensor: return Sum.apply(a, axis=axis, keepdims=keepdims)
def amax(a, axis=None, keepdims: bool = False) -> Tensor: return Max.apply(a, axis=axis, keepdims=keepdims)
def broadcast_to(a, shape) -> Tensor: return BroadcastTo.apply(a, shape=tuple(shape))
def sum_to(a, shape) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return SumTo.apply(a, shape=tuple(shape))
def cumsum(a, axis: int = -1, reverse: bool = False) -> Tensor: return Cumsum.apply(a, axis=axis, reverse=reverse)
def reshape(a, shape) -> Tensor: return Reshape.apply(a, shape=tuple(shape))
def transpose(a, axes=None) -> Tensor: return Transpose.apply(a, axes=axes)
def getitem(a, index) -> Tensor: return GetItem.apply(a, index=index)
def matmul(a, b) -> Tensor: return MatMul.apply(a, b)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) / float(count)


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def softmax(x, axis: int = -1) -> Tensor:
    """减去最大值（作为常数）后做指数归一化；平移不变。"""
    x = as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / tsum(e, axis=axis, keepdims=True)


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """
    3x3 互相关（不翻转卷积核），零填充的 same 语义，H' = ceil(H / stride)。

    Args:
        x: [C_in, H, W]
        weight: [C_out, C_in, 3, 3]
        bias: [C_out] 或 None
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3:
        raise ShapeError(f"conv2d 输入须为 [C,H,W]，得到 {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"卷积核须为 [C_out,C_in,3,3]，得到 {weight.shape}")
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(f"通道数不一致: 输入 {x.shape} 与卷积核 {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride 只支持 1 或 2，得到 {stride}")
    c_out = weight.shape[0]
    oh = same_padding(x.shape[1], stride)[0]
    ow = same_padding(x.shape[2], stride)[0]
    cols = Unfold3x3.apply(x, stride=stride)
    out = matmul(cols, swap_last(reshape(weight, (c_out, -1))))
    if bias is not None:
        out = out + bias
    return reshape(swap_last(out), (c_out, oh, ow))


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """align_corners=False（半像素中心）约定下的一维线性插值矩阵 [n_out, n_in]。"""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """[C,H,W] 双线性缩放，可微（表达为两次矩阵乘）。"""
    x = as_tensor(x)
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"输出尺寸必须为正: {out_h}x{out_w}")
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize 输入须为 [C,H,W]，得到 {x.shape}")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    rows = Tensor(interpolation_matrix(h, out_h))
    cols = Tensor(interpolation_matrix(w, out_w).T)
    return matmul(matmul(rows, x), cols)


KERNELS: Dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid, "tanh": tanh,
    "power": power, "sum": tsum, "mean": mean, "max": amax,
    "neg": neg, "softplus": softplus, "leaky_relu": leaky_relu, "sin": sin, "cos": cos,
}


def elementwise_and_reduce(kernel_id: str, *operands, **kwargs) -> Tensor:
    """按名称调用逐元素/归约内核。"""
    try:
        kernel = KERNELS[kernel_id]
    except KeyError:
        raise ValueError(f"未知内核 '{kernel_id}'，可选: {sorted(KERNELS)}") from None
    return kernel(*operands, **kwargs)


# --- 反向传播 ---

def _reachable_entries(root: TapeEntry) -> List[TapeEntry]:
    seen: Dict[int, TapeEntry] = {}
    stack_ = [root]
    while stack_:
        entry = stack_.pop()
        if id(entry) in seen:
            continue
        if entry.released:
            raise GraphReleasedError("计算图已在之前的 backward 中释放；如需多次反传请使用 retain_graph=True")
        seen[id(entry)] = entry
        for t in entry.inputs:
            if t._entry is not None and id(t._entry) not in seen:
                stack_.append(t._entry)
    return sorted(seen.values(), key=lambda e: e.index, reverse=True)


def _propagate(root: Tensor, seed: Tensor, create_graph: bool, capture: Dict[int, Tensor]) -> Tuple[Dict[int, Tuple[Tensor, Tensor]], Dict[int, Tensor]]:
    """
    从 root 反向传播 seed。

    Returns:
        (叶子 -> (叶子张量, 梯度), 捕获的中间梯度)，键均为 id(tensor)。
    """
    grads: Dict[int, Tensor] = {id(root): seed}
    leaves: Dict[int, Tensor] = {}
    captured: Dict[int, Tensor] = {}
    if root._entry is None:
        leaves[id(root)] = root
    else:
        with set_grad_enabled(create_graph):
            for entry in _reachable_entries(root._entry):
                key = id(entry.output)
                g = grads.pop(key, None)
                if g is None:
                    continue
                if key in capture:
                    captured[key] = g
                in_grads = entry.function.backward(g)
                for inp, ig in zip(entry.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    k = id(inp)
                    grads[k] = ig if k not in grads else grads[k] + ig
                    if inp._entry is None:
                        leaves[k] = inp
    for k in capture:
        if k in grads and k not in captured:
            captured[k] = grads[k]
    return {k: (leaf, grads[k]) for k, leaf in leaves.items() if k in grads}, captured


def _reachable_entries_unchecked(root: TapeEntry) -> List[TapeEntry]:
    seen: Dict[int, TapeEntry] = {}
    stack_ = [root]
    while stack_:
        entry = stack_.pop()
        if id(entry) in seen:
            continue
        seen[id(entry)] = entry
        stack_.extend(t._entry for t in entry.inputs if t._entry is not None)
    return list(seen.values())


def backward(loss: Tensor, retain_graph: bool = False, create_graph: bool = False) -> None:
    """
    从标量 loss 反向传播，把梯度累加到所有 requires_grad 的叶子上。
    默认在结束后释放计算图并清空当前线程的磁带。
    """
    if loss.size != 1:
        raise ShapeError(f"backward 需要单元素的损失，得到形状 {loss.shape}")
    if not loss.requires_grad:
        logger.debug("损失不依赖任何可求导叶子，backward 为空操作")
        return
    seed = Tensor(np.ones_like(loss.data), dtype=loss.data.dtype)
    leaf_grads, _ = _propagate(loss, seed, create_graph, {})
    for leaf, g in leaf_grads.values():
        data = np.asarray(g.data, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = data.copy() if leaf.grad is None else leaf.grad + data
    if not retain_graph:
        if loss._entry is not None:
            for entry in _reachable_entries_unchecked(loss._entry):
                entry.released = True
        current_tape().clear()


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """
    计算标量 output 对 inputs 的梯度并返回（不写入 .grad，不释放计算图）。
    create_graph=True 时返回的梯度本身记录在磁带上，可以再次求导。
    """
    if output.size != 1:
        raise ShapeError(f"grad 需要单元素输出，得到形状 {output.shape}")
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data), dtype=t.data.dtype) for t in inputs]
    wanted = {id(t): t for t in inputs}
    seed = Tensor(np.ones_like(output.data), dtype=output.data.dtype)
    leaf_grads, captured = _propagate(output, seed, create_graph, wanted)
    result = []
    for t in inputs:
        g = captured.get(id(t))
        if g is None and id(t) in leaf_grads:
            g = leaf_grads[id(t)][1]
        result.append(g if g is not None else Tensor(np.zeros_like(t.data), dtype=t.data.dtype))
    return result
