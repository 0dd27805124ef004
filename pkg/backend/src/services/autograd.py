"""基于 numpy 的最小反向模式自动微分引擎。"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """操作数形状不兼容。"""


class DetachedGraphError(RuntimeError):
    """损失不在任何活动磁带上，无法反向传播。"""


BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tensor:
    """
    n 维 float64 数组，可选地参与梯度磁带。
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    # 让 ndarray 与 Tensor 混合运算时交给 Tensor 的反射运算符处理
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        *,
        copy: bool = True,
    ) -> None:
        self.data: np.ndarray = (
            np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        )
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {list(self.shape)} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def __repr__(self) -> str:
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    # 运算符重载
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_(self, index)


@dataclass
class TapeEntry:
    """磁带上的一条记录：输入、输出与反向规则。"""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    """
    按执行顺序记录操作的梯度磁带。

    记录顺序即拓扑顺序：每个操作的输入都先于它产生。反向传播按逆序
    访问每条记录恰好一次。磁带在 backward 之后保留，可重复调用，
    叶子梯度累加直到显式清零。
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._token: Any = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward: BackwardRule,
    ) -> None:
        output._tape = self
        self.entries.append(TapeEntry(op=op, inputs=inputs, output=output, backward=backward))

    def backward(self, loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
        """
        从标量损失反向传播，将 dLoss/dLeaf 累加到叶子的 grad。

        :param loss: 本磁带上产生的标量损失。
        :param inputs: 可选，只有这些叶子会累加梯度。
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {list(loss.shape)}")
        if loss._tape is not self:
            raise DetachedGraphError("loss is detached: it was not produced under this tape")

        targets = None if inputs is None else {id(t) for t in inputs}
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self:
                    key = id(tensor)
                    pending[key] = pending[key] + grad if key in pending else grad
                    continue
                if targets is not None and id(tensor) not in targets:
                    continue
                grad = np.broadcast_to(grad, tensor.shape)
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """在产生 loss 的磁带上执行反向传播。"""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {list(loss.shape)}")
    if loss._tape is None:
        raise DetachedGraphError("loss is detached: no tape recorded its computation")
    loss._tape.backward(loss, inputs=inputs)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextmanager
def no_tape() -> Iterator[None]:
    """暂停记录；块内的运算全部是纯前向。"""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.zero_grad()


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, rule: BackwardRule) -> Tensor:
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad, copy=False)
    if needs_grad:
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.record(op, inputs, result, rule)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}") from exc


# ---------------------------------------------------------------------------
# 逐元素算术
# ---------------------------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, rule)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, rule)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, rule)


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit("div", (a, b), out, rule)


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def power(a: Any, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * p * np.power(a.data, p - 1.0),)

    return _emit("power", (a,), np.power(a.data, p), rule)


def sqrt(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        # 0 处取次梯度 0
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _emit("sqrt", (a,), out, rule)


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def relu(a: Any) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def clamp_min(a: Any, floor: float) -> Tensor:
    """max(a, floor)，梯度只穿过大于 floor 的元素。"""
    a = as_tensor(a)
    mask = a.data > floor
    return _emit("clamp_min", (a,), np.where(mask, a.data, floor), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# 归约
# ---------------------------------------------------------------------------

def _axes(ndim: int, axis: Optional[int | tuple[int, ...]]) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Any, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(a.ndim, axis)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (_expand_reduced(g, a.shape, axes, keepdims).copy(),)

    return _emit("sum", (a,), np.sum(a.data, axis=axes, keepdims=keepdims), rule)


def mean(a: Any, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(a.ndim, axis)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: cannot reduce empty axes of shape {list(a.shape)}")

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (_expand_reduced(g, a.shape, axes, keepdims) / count,)

    return _emit("mean", (a,), np.mean(a.data, axis=axes, keepdims=keepdims), rule)


def variance(a: Any, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    """总体方差（除以 N）。"""
    a = as_tensor(a)
    axes = _axes(a.ndim, axis)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"variance: cannot reduce empty axes of shape {list(a.shape)}")
    centered = a.data - np.mean(a.data, axis=axes, keepdims=True)
    out = np.mean(centered * centered, axis=axes, keepdims=keepdims)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (_expand_reduced(g, a.shape, axes, keepdims) * (2.0 / count) * centered,)

    return _emit("variance", (a,), out, rule)


# ---------------------------------------------------------------------------
# 形状操作
# ---------------------------------------------------------------------------

def reshape(a: Any, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {list(a.shape)} into {list(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def swapaxes(a: Any, axis1: int = -1, axis2: int = -2) -> Tensor:
    a = as_tensor(a)
    return _emit(
        "swapaxes", (a,), np.swapaxes(a.data, axis1, axis2), lambda g: (np.swapaxes(g, axis1, axis2),)
    )


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(list(p.shape)) for p in parts)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return _emit("concat", parts, out, rule)


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("stack: no operands")
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(list(p.shape)) for p in parts)
        raise ShapeError(f"stack: incompatible shapes {shapes}") from exc

    def rule(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return _emit("stack", parts, out, rule)


def slice_(a: Any, index: Any) -> Tensor:
    """
    通用索引（切片或整数索引数组）。反向时按索引累加散射，
    因此重叠的分帧索引也能得到正确梯度。
    """
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {list(a.shape)}") from exc

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("slice", (a,), np.array(out, dtype=np.float64), rule)


# ---------------------------------------------------------------------------
# 线性代数
# ---------------------------------------------------------------------------

def matmul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {list(a.shape)} and {list(b.shape)}")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}") from exc

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, rule)


def conv1d(x: Any, weight: Any, bias: Any = None) -> Tensor:
    """
    沿时间轴的 valid 一维卷积，显式滑动点积实现。

    :param x: 形状 [..., T, C_in]。
    :param weight: 形状 [K, C_in, C_out]。
    :param bias: 可选，形状 [C_out]。
    :return: 形状 [..., T-K+1, C_out]。
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3 or x.ndim < 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {list(x.shape)} and {list(weight.shape)}")
    kernel, c_in, c_out = weight.shape
    steps = x.shape[-2] - kernel + 1
    if steps < 1:
        raise ShapeError(
            f"conv1d: input length {x.shape[-2]} shorter than kernel {kernel} "
            f"(shapes {list(x.shape)} and {list(weight.shape)})"
        )
    # [..., T', C_in, K] -> [..., T', K, C_in] -> [..., T', K*C_in]
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=-2)
    cols = np.swapaxes(windows, -1, -2).reshape(x.shape[:-2] + (steps, kernel * c_in))
    flat_w = weight.data.reshape(kernel * c_in, c_out)
    out = cols @ flat_w

    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {list(bias.shape)} does not match {c_out} channels")
        out = out + bias.data
        inputs = (x, weight, bias)

    def rule(g: np.ndarray) -> list[np.ndarray]:
        g_cols = (g @ flat_w.T).reshape(x.shape[:-2] + (steps, kernel, c_in))
        gx = np.zeros_like(x.data)
        for k in range(kernel):
            gx[..., k : k + steps, :] += g_cols[..., :, k, :]
        gw = (cols.reshape(-1, kernel * c_in).T @ g.reshape(-1, c_out)).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, c_out).sum(axis=0))
        return grads

    return _emit("conv1d", inputs, out, rule)


# ---------------------------------------------------------------------------
# 相似度与损失
# ---------------------------------------------------------------------------

def cosine_similarity(a: Any, b: Any, axis: int = -1) -> Tensor:
    """沿 axis 的余弦相似度，支持广播；零范数输入报错。"""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("cosine_similarity", a, b)
    norm_a = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    norm_b = np.sqrt(np.sum(b.data * b.data, axis=axis, keepdims=True))
    if np.any(norm_a == 0) or np.any(norm_b == 0):
        raise ValueError("cosine_similarity: zero-norm embedding")
    dot = np.sum(a.data * b.data, axis=axis, keepdims=True)
    cos = dot / (norm_a * norm_b)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = np.expand_dims(g, axis)
        ga = g * (b.data / (norm_a * norm_b) - cos * a.data / (norm_a * norm_a))
        gb = g * (a.data / (norm_a * norm_b) - cos * b.data / (norm_b * norm_b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("cosine_similarity", (a, b), np.squeeze(cos, axis=axis), rule)


def softmax(a: Any, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, rule)


def softmax_cross_entropy(logits: Any, labels: Any) -> Tensor:
    """
    批平均的 softmax 交叉熵。

    :param logits: [C] 或 [B, C]。
    :param labels: 整数标签，标量或长度 B。
    """
    logits = as_tensor(logits)
    label_arr = np.asarray(labels, dtype=np.int64)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    label_arr = label_arr.reshape(-1)
    if z.ndim != 2 or label_arr.shape[0] != z.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: incompatible shapes {list(logits.shape)} and {list(label_arr.shape)}"
        )
    num_classes = z.shape[1]
    if np.any(label_arr < 0) or np.any(label_arr >= num_classes):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {num_classes})")
    rows = np.arange(z.shape[0])
    shifted = z - np.max(z, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    losses = log_norm - shifted[rows, label_arr]
    out = np.array(np.mean(losses))

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, label_arr] -= 1.0
        grad = probs * (g / z.shape[0])
        return (grad[0] if single else grad,)

    return _emit("softmax_cross_entropy", (logits,), out, rule)
