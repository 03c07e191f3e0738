"""
神经网络基础层：卷积块、全连接、batch norm、dropout、swish、平均池化、点积注意力

函数式算子都接受可选的前导 batch 维；Module 子类负责持有参数与 running 统计量。
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ppap_errors import DegenerateBatchError, DimensionError
from tensor_autodiff import ArrayLike, Parameter, Tensor, as_tensor, matmul, record_op, softmax, transpose


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class Activation(str, Enum):
    SWISH = "swish"
    LINEAR = "linear"


@dataclass(frozen=True)
class ConvBlockSpec:
    filters: int
    pool: Tuple[int, int] = (2, 2)
    dropout_rate: float = 0.1
    kernel: Tuple[int, int] = (3, 3)

    def __post_init__(self):
        if self.filters < 1:
            raise ValueError(f"filters must be positive, got {self.filters}")
        if tuple(self.kernel) != (3, 3):
            raise ValueError(f"only 3x3 kernels are supported, got {self.kernel}")
        if len(self.pool) != 2 or min(self.pool) < 1:
            raise ValueError(f"pool must be two positive ints, got {self.pool}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class DenseSpec:
    units: int
    activation: Activation = Activation.LINEAR

    def __post_init__(self):
        if self.units < 1:
            raise ValueError(f"units must be positive, got {self.units}")
        object.__setattr__(self, "activation", Activation(self.activation))


def _with_batch(x: Tensor, rank: int, op: str) -> Tuple[np.ndarray, bool]:
    """返回 (带 batch 维的数据, 是否补了 batch 维)。"""
    if x.ndim == rank:
        return x.data[None], True
    if x.ndim == rank + 1:
        return x.data, False
    raise DimensionError(f"{op} expects rank {rank} or {rank + 1} input, got shape {x.shape}")


# ---- 函数式算子 ----
def conv2d(x: ArrayLike, kernel: ArrayLike, bias: ArrayLike) -> Tensor:
    """stride 1、零填充 "same" 的 3x3 卷积，x: [B?, H, W, Cin]，kernel: [3, 3, Cin, Cout]。"""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    xb, squeezed = _with_batch(x, 3, "conv2d")
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d kernel must be [3, 3, Cin, Cout], got {kernel.shape}")
    batch, height, width, channels = xb.shape
    if height < 1 or width < 1:
        raise DimensionError(f"conv2d needs spatial dims >= 1, got {x.shape}")
    if kernel.shape[2] != channels:
        raise DimensionError(f"conv2d channel mismatch: input has {channels}, kernel expects {kernel.shape[2]}")
    out_channels = kernel.shape[3]
    if bias.shape != (out_channels,):
        raise DimensionError(f"conv2d bias must be [{out_channels}], got {bias.shape}")

    padded = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # windows[b, h, w, c, i, j] = padded[b, h + i, w + j, c]
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * height * width, 9 * channels)
    kmat = kernel.data.reshape(9 * channels, out_channels)
    out = (cols @ kmat + bias.data).reshape(batch, height, width, out_channels)

    def backward(g: np.ndarray):
        g2 = g.reshape(batch * height * width, out_channels)
        d_kernel = (cols.T @ g2).reshape(kernel.shape)
        d_bias = g2.sum(axis=0)
        d_cols = (g2 @ kmat.T).reshape(batch, height, width, 3, 3, channels)
        d_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                d_padded[:, i:i + height, j:j + width, :] += d_cols[:, :, :, i, j, :]
        d_x = d_padded[:, 1:height + 1, 1:width + 1, :]
        return (d_x[0] if squeezed else d_x), d_kernel, d_bias

    return record_op(out[0] if squeezed else out, (x, kernel, bias), backward, "conv2d")


def batch_norm(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    mode: Mode,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.99,
    epsilon: float = 1e-5,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    按最后一维（通道）归一化

    训练模式在 batch+空间维上求统计量并更新 running 统计量
    （running = momentum * running + (1 - momentum) * batch）；评估模式直接使用 running 统计量。

    Returns:
        (输出, 新 running_mean, 新 running_var)
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"batch_norm scale/shift must be [{channels}], got {gamma.shape}/{beta.shape}")
    if Mode(mode) is Mode.TRAIN:
        if x.ndim < 2 or x.shape[0] < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs a batch of >= 2, got shape {x.shape}")
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        normalized = centered / (var + epsilon).sqrt()
        running_mean = momentum * running_mean + (1.0 - momentum) * mean.data.reshape(channels)
        running_var = momentum * running_var + (1.0 - momentum) * var.data.reshape(channels)
    else:
        normalized = (x - running_mean) / np.sqrt(running_var + epsilon)
    return normalized * gamma + beta, running_mean, running_var


def dropout(x: ArrayLike, rate: float, mode: Mode, rng: Optional[np.random.Generator] = None) -> Tensor:
    """inverted dropout；评估模式或 rate=0 时原样返回输入。"""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if Mode(mode) is Mode.EVAL or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def swish(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return record_op(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),), "swish")


def avg_pool(x: ArrayLike, pool: Tuple[int, int]) -> Tensor:
    """不重叠窗口平均池化，不足一个窗口的尾部行/列直接丢弃。"""
    x = as_tensor(x)
    ph, pw = int(pool[0]), int(pool[1])
    if ph < 1 or pw < 1:
        raise DimensionError(f"pool window must be positive, got {pool}")
    xb, squeezed = _with_batch(x, 3, "avg_pool")
    batch, height, width, channels = xb.shape
    out_h, out_w = height // ph, width // pw
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"pool window {pool} larger than input {height}x{width}")
    cropped = xb[:, :out_h * ph, :out_w * pw, :]
    out = cropped.reshape(batch, out_h, ph, out_w, pw, channels).mean(axis=(2, 4))

    def backward(g: np.ndarray):
        gb = g[None] if squeezed else g
        spread = np.repeat(np.repeat(gb, ph, axis=1), pw, axis=2) / (ph * pw)
        d_x = np.zeros_like(xb)
        d_x[:, :out_h * ph, :out_w * pw, :] = spread
        return (d_x[0] if squeezed else d_x,)

    return record_op(out[0] if squeezed else out, (x,), backward, "avg_pool")


def dense(x: ArrayLike, weight: ArrayLike, bias: ArrayLike, activation: Activation = Activation.LINEAR) -> Tensor:
    """沿最后一维做仿射变换再接激活函数。"""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense bias must be [{weight.shape[1]}], got {bias.shape}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, weight.shape[0]), weight) + bias
    y = y.reshape(*lead, weight.shape[1])
    return swish(y) if Activation(activation) is Activation.SWISH else y


def dot_product_attention(q: ArrayLike, k: ArrayLike, v: ArrayLike) -> Tensor:
    """
    不缩放的点积注意力：A = softmax(q kᵀ)（逐行），C = A v，再对 N 轴取均值

    Args:
        q, k, v: [B?, N, D]，三者形状相同

    Returns:
        Tensor: [B?, D]
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention inputs must share shape, got {q.shape}, {k.shape}, {v.shape}")
    if q.ndim not in (2, 3):
        raise DimensionError(f"attention expects [N, D] or [B, N, D], got {q.shape}")
    if q.shape[-2] == 0:
        raise DimensionError("attention over N=0 frames")
    swap = (1, 0) if q.ndim == 2 else (0, 2, 1)
    weights = softmax(matmul(q, transpose(k, swap)), axis=-1)
    return matmul(weights, v).mean(axis=-2)


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---- Module ----
class Module:
    """持有 Parameter、子 Module 与 buffer 的容器，参数路径形如 'f_s.block3.conv.kernel'。"""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.array(value, dtype=np.float64)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, module in self._modules.items():
            yield from module.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: value.copy() for name, value in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(name for name, _ in self.named_parameters()) | set(name for name, _ in self.named_buffers())
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, param in self.named_parameters():
            param.assign(state[name])
        self._load_buffers(state, "")

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name, current in list(self._buffers.items()):
            value = np.array(state[f"{prefix}{name}"], dtype=np.float64)
            if value.shape != current.shape:
                raise DimensionError(f"buffer {prefix}{name}: shape {value.shape} != {current.shape}")
            self._buffers[name] = value
        for name, module in self._modules.items():
            module._load_buffers(state, f"{prefix}{name}.")


class Conv2d(Module):
    def __init__(self, in_channels: int, filters: int, rng: np.random.Generator):
        super().__init__()
        self.kernel = Parameter(glorot_uniform((3, 3, in_channels, filters), 9 * in_channels, 9 * filters, rng))
        self.bias = Parameter(np.zeros(filters))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.99, epsilon: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.momentum = momentum
        self.epsilon = epsilon
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor, mode: Mode = Mode.EVAL) -> Tensor:
        out, mean, var = batch_norm(
            x, self.gamma, self.beta, mode,
            self._buffers["running_mean"], self._buffers["running_var"],
            momentum=self.momentum, epsilon=self.epsilon,
        )
        self._buffers["running_mean"], self._buffers["running_var"] = mean, var
        return out


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: Tensor, mode: Mode = Mode.EVAL, rng: Optional[np.random.Generator] = None) -> Tensor:
        return dropout(x, self.rate, mode, rng)


class Dense(Module):
    def __init__(self, in_features: int, spec: DenseSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.kernel = Parameter(glorot_uniform((in_features, spec.units), in_features, spec.units, rng))
        self.bias = Parameter(np.zeros(spec.units))

    @property
    def in_features(self) -> int:
        return self.kernel.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.kernel, self.bias, self.spec.activation)


class ConvBlock(Module):
    """conv 3x3 -> batch norm -> dropout -> swish -> 平均池化"""

    def __init__(self, in_channels: int, spec: ConvBlockSpec, rng: np.random.Generator,
                 bn_momentum: float = 0.99, bn_epsilon: float = 1e-5):
        super().__init__()
        self.spec = spec
        self.conv = Conv2d(in_channels, spec.filters, rng)
        self.bn = BatchNorm(spec.filters, momentum=bn_momentum, epsilon=bn_epsilon)
        self.dropout = Dropout(spec.dropout_rate)

    def forward(self, x: Tensor, mode: Mode = Mode.EVAL, rng: Optional[np.random.Generator] = None) -> Tensor:
        y = self.bn(self.conv(x), mode)
        y = self.dropout(y, mode, rng)
        return avg_pool(swish(y), self.spec.pool)
