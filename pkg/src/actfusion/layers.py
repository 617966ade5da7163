"""Parameterised layers on top of :mod:`actfusion.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Minimal parameter container.

    Attributes holding a :class:`Tensor` with ``requires_grad`` are
    parameters; attributes holding a :class:`Module` (or a list of them) are
    children. Names follow attribute assignment order, so two modules built
    from the same config enumerate parameters identically.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{key}.{i}"] = v
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = OrderedDict(self.named_parameters())
        missing = [n for n in own if n not in state]
        extra = [n for n in state if n not in own]
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


class Linear(Module):
    """Fully connected layer; ``weight`` is (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _param(glorot_uniform(rng, (out_features, in_features), in_features, out_features))
        self.bias = _param(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        k = kernel_size
        fan_in, fan_out = in_channels * k * k, out_channels * k * k
        self.weight = _param(glorot_uniform(rng, (out_channels, in_channels, k, k), fan_in, fan_out))
        self.bias = _param(np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LSTMCell(Module):
    """Peephole-free LSTM unit.

    ``weight`` is (4H, D+H) acting on ``[x; h_prev]``; gate rows are packed
    in the order input, forget, output, candidate. The forget-gate bias
    starts at +1.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        d, h = input_size, hidden_size
        self.weight = _param(glorot_uniform(rng, (4 * h, d + h), d + h, h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        self.bias = _param(b)

    def __call__(self, x: Tensor, h_prev: Tensor | None = None, c_prev: Tensor | None = None):
        return lstm_unit(self.weight, self.bias, x, h_prev, c_prev)


def lstm_unit(weight: Tensor, bias: Tensor, x: Tensor, h_prev: Tensor | None, c_prev: Tensor | None):
    """One LSTM step; ``x`` is (D,) or (B, D). Missing states mean zeros."""
    h4 = weight.shape[0]
    if h4 % 4:
        raise ShapeError(f"LSTM weight rows must be a multiple of 4, got {h4}")
    hid = h4 // 4
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, x.shape[0]))
    batch, d = x.shape
    if weight.shape[1] != d + hid:
        raise ShapeError(f"LSTM weight expects input {weight.shape[1] - hid}, got {d}")
    if bias.shape != (h4,):
        raise ShapeError(f"LSTM bias must be ({h4},), got {bias.shape}")
    if h_prev is None:
        h_prev = Tensor(np.zeros((batch, hid)))
    elif h_prev.ndim == 1:
        h_prev = T.reshape(h_prev, (1, hid))
    if c_prev is None:
        c_prev = Tensor(np.zeros((batch, hid)))
    elif c_prev.ndim == 1:
        c_prev = T.reshape(c_prev, (1, hid))
    if h_prev.shape != (batch, hid) or c_prev.shape != (batch, hid):
        raise ShapeError(f"LSTM state shapes {h_prev.shape}/{c_prev.shape} != {(batch, hid)}")
    z = T.linear(T.concat([x, h_prev], axis=1), weight, bias)
    i = T.sigmoid(z[:, 0:hid])
    f = T.sigmoid(z[:, hid:2 * hid])
    o = T.sigmoid(z[:, 2 * hid:3 * hid])
    g = T.tanh(z[:, 3 * hid:])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    if squeeze:
        h = T.reshape(h, (hid,))
        c = T.reshape(c, (hid,))
    return h, c


max_pool2d = T.max_pool2d
upsample_nearest = T.upsample_nearest
