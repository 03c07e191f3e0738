"""
最小的 float64 稠密张量运算 + 反向模式自动微分 + Adam

每个前向运算都会记录父节点以及一个 backward 闭包（输出梯度 -> 各父节点梯度），
Tensor.backward() 按拓扑逆序累积梯度。前向或反向出现 NaN/Inf 时抛出 NumericError。
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from ppap_errors import DimensionError, NumericError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite value produced by {where}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状。"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """不可变的 float64 张量，requires_grad 时参与反向传播。"""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=np.float64)
        _check_finite(array, "Tensor constructor")
        self.data: np.ndarray = _freeze(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, where: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, where)
        out = cls.__new__(cls)
        out.data = _freeze(data)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ---- 基本属性 ----
    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- 运算符 ----
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    # ---- 反向传播 ----
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """从当前节点反向传播；未给 grad 时要求当前节点是标量。"""
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, "backward pass")
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class Parameter(Tensor):
    """带名字与梯度缓冲的可训练张量，Adam 更新时整体替换 data。"""

    def __init__(self, value: ArrayLike, name: str = ""):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def assign(self, value: np.ndarray) -> None:
        array = np.array(value, dtype=np.float64)
        if array.shape != self.data.shape:
            raise DimensionError(f"{self.name}: cannot assign shape {array.shape} to {self.data.shape}")
        _check_finite(array, f"assignment to {self.name}")
        self.data = _freeze(array)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, name: str = "op") -> Tensor:
    """自定义运算入口：backward(g) 返回与 parents 一一对应的梯度（不需要时为 None）。"""
    return Tensor._from_op(data, parents, backward, name)


# ---- 逐元素运算 ----
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return record_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record_op(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return record_op(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---- 形状与归约 ----
def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return record_op(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op(out, (a,), backward, "sum")


def tensor_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError(f"mean over an empty axis of shape {a.shape}")
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from exc
    return record_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def take(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record_op(np.array(out), (a,), backward, "index")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op(out, parts, backward, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot stack shapes {[p.shape for p in parts]}") from exc

    def backward(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return record_op(out, parts, backward, "stack")


# ---- 矩阵运算 ----
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """矩阵乘法；两者都可带相同的前导 batch 维（[..., R, S] @ [..., S, U]）。"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul needs matrices of equal rank, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return record_op(
        np.matmul(a.data, b.data),
        (a, b),
        lambda g: (np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)),
        "matmul",
    )


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError(f"softmax over an empty axis of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op(out, (x,), backward, "softmax")


# ---- Adam ----
@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_parameter(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data), **hyper)


def adam_step(param: Parameter, state: AdamState) -> Tuple[Parameter, AdamState]:
    """一次带偏差校正的 Adam 更新，返回 (param, 新 state)。"""
    if param.size == 0:
        raise DimensionError(f"Adam update on zero-length parameter {param.name!r}")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(f"Adam state shape {state.m.shape} does not match {param.name!r} {param.shape}")
    g = param.grad
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    param.assign(param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return param, replace(state, m=m, v=v, step=t)


class AdamOptimizer:
    """为一组 Parameter 维护各自的 AdamState。"""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.states = [
            AdamState.for_parameter(p, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
            for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            _, self.states[i] = adam_step(p, self.states[i])


# ---- 梯度检查 ----
def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    用中心差分检查解析梯度

    Args:
        f: 无参可调用对象，返回标量 Tensor；必须是确定性的（关闭 dropout，固定 BN 模式）
        params: 待检查的参数
        h: 差分步长，取值 [1e-6, 1e-4]
        max_entries: 每个参数最多随机抽查的元素数，None 表示全部
        seed: 抽样用的随机种子

    Returns:
        float: 各参数 ‖analytic − fd‖∞ / max(‖analytic‖∞, ‖fd‖∞, 1e-8) 的最大值
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"finite-difference step h={h} outside [1e-6, 1e-4]")
    for p in params:
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = {id(p): p.grad.copy() for p in params}

    def evaluate() -> float:
        value = float(f().data.reshape(-1)[0])
        if not np.isfinite(value):
            raise NumericError("function value is not finite during grad_check")
        return value

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat_count = p.size
        if max_entries is not None and flat_count > max_entries:
            indices = rng.choice(flat_count, size=max_entries, replace=False)
        else:
            indices = np.arange(flat_count)
        original = p.data
        a = analytic[id(p)].reshape(-1)[indices]
        fd = np.empty(len(indices))
        try:
            for j, flat in enumerate(indices):
                bumped = original.copy().reshape(-1)
                bumped[flat] += h
                p.assign(bumped.reshape(original.shape))
                plus = evaluate()
                bumped[flat] -= 2.0 * h
                p.assign(bumped.reshape(original.shape))
                minus = evaluate()
                fd[j] = (plus - minus) / (2.0 * h)
        finally:
            # 出错时也要还原调用方的参数
            p.assign(original)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(fd), initial=0.0), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - fd), initial=0.0) / scale))
    return worst
