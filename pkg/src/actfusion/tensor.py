"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
Calling :func:`backward` on a scalar walks that record in reverse
topological order. Gradients land in ``.grad`` of leaf tensors created
with ``requires_grad=True`` and accumulate across calls.

Broadcasting is deliberately narrow: operands must have identical shapes or
one of them must be a scalar. Anything else goes through
:func:`broadcast_to`, whose backward rule is an explicit reduction.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording them."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    # let numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = rule if track else None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} differ; only identical shapes or a "
            "scalar operand are supported (use broadcast_to)"
        )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product (or scalar times tensor)."""
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
    )


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


# shape ops -----------------------------------------------------------------

def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1
    )

    def rule(g):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        return (r.reshape(src),)

    return _make(out, (a,), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def rule(g):
        full = np.zeros(src, dtype=DTYPE)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tensors, rule)


# reductions ----------------------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), rule)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / float(n))


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (batch, in) or (in,)."""
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, broadcast_to(bias, out.shape))
    if squeeze:
        out = reshape(out, (out.shape[1],))
    return out


# softmax family --------------------------------------------------------------

def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def rule(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets, weight: float = 1.0) -> Tensor:
    """Multi-target cross entropy ``-weight * sum_{n in targets} log softmax(logits)[n]``.

    ``logits`` is (N,) with ``targets`` an iterable of class indices, or
    (B, N) with ``targets`` a (B, N) 0/1 mask (one target set per row). The
    batched form returns the sum over rows.
    """
    if weight <= 0:
        raise ValueError(f"weight must be positive, got {weight}")
    n = logits.shape[-1]
    if logits.ndim == 1:
        idx = sorted(set(int(t) for t in targets))
        if not idx:
            raise ValueError("target set is empty")
        if idx[0] < 0 or idx[-1] >= n:
            raise ValueError(f"target indices {idx} out of range for {n} classes")
        mask = np.zeros(n)
        mask[idx] = 1.0
    elif logits.ndim == 2:
        mask = np.asarray(targets, dtype=DTYPE)
        if mask.shape != logits.shape:
            raise ShapeError(f"target mask shape {mask.shape} != logits shape {logits.shape}")
        if np.any(mask.sum(axis=1) == 0):
            raise ValueError("target set is empty for at least one row")
    else:
        raise ShapeError(f"logits must be 1-D or 2-D, got {logits.shape}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -weight * float((mask * logp).sum())
    p = np.exp(logp)
    count = mask.sum(axis=-1, keepdims=True)

    def rule(g):
        return (g * weight * (count * p - mask),)

    return _make(np.asarray(loss), (logits,), rule)


# convolution & resampling ----------------------------------------------------

def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is (C_out, C_in, k, k).
    Output spatial size is ``floor((H + 2p - k) / stride) + 1``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    xb, squeeze = _as_batched(x)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    n, c, h, w = xb.shape
    o, ci, k, _ = kernel.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias must be ({o},), got {bias.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    # channel-major layout (C, N, H, W) keeps every im2col copy a run of contiguous rows
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    xp[:, :, padding:padding + h, padding:padding + w] = xb.data.transpose(1, 0, 2, 3)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
    cols2 = cols.reshape(c * k * k, n * ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = (wmat @ cols2).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out_nchw = out.transpose(1, 0, 2, 3)

    need_x = xb.requires_grad

    def rule(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (g2 @ cols2.T).reshape(kernel.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gx = None
        if need_x:
            dcols = (wmat.T @ g2).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (xb, kernel, bias) if bias is not None else (xb, kernel)
    res = _make(out_nchw, parents, rule)
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (trailing odd rows/columns are dropped).

    Ties route the gradient to the first maximal element in row-major order.
    """
    xb, squeeze = _as_batched(x)
    n, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise ShapeError(f"max_pool2d needs at least 2x2 input, got {h}x{w}")
    he, we = h - h % 2, w - w % 2
    d = xb.data
    q = [d[:, :, 0:he:2, 0:we:2], d[:, :, 0:he:2, 1:we:2], d[:, :, 1:he:2, 0:we:2], d[:, :, 1:he:2, 1:we:2]]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for part in q:
        m = (part == out) & ~taken
        taken |= m
        masks.append(m)
    src = xb.shape

    def rule(g):
        gx = np.zeros(src, dtype=DTYPE)
        gx[:, :, 0:he:2, 0:we:2] = g * masks[0]
        gx[:, :, 0:he:2, 1:we:2] = g * masks[1]
        gx[:, :, 1:he:2, 0:we:2] = g * masks[2]
        gx[:, :, 1:he:2, 1:we:2] = g * masks[3]
        return (gx,)

    res = _make(out, (xb,), rule)
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def upsample_nearest(x: Tensor, factor) -> Tensor:
    """Repeat every pixel ``factor x factor`` times."""
    if isinstance(factor, bool) or not isinstance(factor, (int, np.integer)):
        if isinstance(factor, float) and factor.is_integer():
            factor = int(factor)
        else:
            raise ValueError(f"upsampling factor must be an integer, got {factor!r}")
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    xb, squeeze = _as_batched(x)
    n, c, h, w = xb.shape
    out = np.repeat(np.repeat(xb.data, factor, axis=2), factor, axis=3)

    def rule(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    res = _make(out, (xb,), rule)
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


# backward pass ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            g = np.asarray(g, dtype=DTYPE)
            if g.shape != node.shape:
                g = g.reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
