"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`ComputationRecord` is active are appended
to it in execution order.  :func:`backward` replays the record in reverse,
visiting every recorded operation once.  Outside a record nothing is tracked,
which doubles as the inference path.

Only the operations needed by the CNN-BLSTM graph are provided.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_active_records: list["ComputationRecord"] = []


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return scale(self, 1.0 / float(other))

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationRecord:
    """Ordered log of executed operations, replayable in reverse.

    Use as a context manager; records nest, the innermost one receives ops.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _active_records.append(self)
        return self

    def __exit__(self, *exc):
        _active_records.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        """Tensors requiring grad that were consumed but never produced here."""
        produced = {id(n.output) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


def recording() -> bool:
    return bool(_active_records)


def _emit(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _active_records and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_records[-1].nodes.append(Node(op, inputs, out, backward))
    return out


def backward(record: ComputationRecord, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every leaf of ``record`` and on ``params``.

    Gradients are overwritten, not accumulated.  Leaves the loss does not
    depend on receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = record.leaves()
    produced = {id(n.output) for n in record.nodes}
    if id(loss) not in produced and not any(t is loss for t in leaves):
        raise ValueError("loss is not reachable from the recorded operations")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = adjoints.get(key)
            adjoints[key] = gi if prev is None else prev + gi

    for t in leaves:
        t.grad = np.array(adjoints.get(id(t), np.zeros_like(t.data)), dtype=DTYPE).reshape(t.shape)
    for t in params:
        if t.requires_grad and not any(t is leaf for leaf in leaves):
            t.grad = np.zeros_like(t.data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), grad)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = tuple(range(a.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tensor_sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def grad(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return _emit("getitem", np.array(a.data[index]), (a,), grad)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    n = len(tensors)
    return _emit("stack", np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- layers


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the trailing axis of ``x``."""
    m, n = weight.shape
    if x.shape[-1] != n:
        raise ShapeError(f"affine: input trailing extent {x.shape[-1]} != weight columns {n} "
                         f"(input {x.shape}, weight {weight.shape})")
    if bias is not None and bias.shape != (m,):
        raise ShapeError(f"affine: bias shape {bias.shape} != ({m},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def grad(g):
        g2 = g.reshape(-1, m)
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, n)
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("affine", out, inputs, grad)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |v|
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def elementwise(x: Tensor, kind: str) -> Tensor:
    try:
        return _ELEMENTWISE[kind](x)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), grad)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(y)
    return _emit("log_softmax", y, (x,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    padding: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def out_length(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation on ``(N, C, H, W)`` or ``(C, H, W)`` input."""
    if x.ndim == 3:
        return reshape(conv2d(reshape(x, (1,) + x.shape), spec, weight, bias),
                       (spec.out_channels, spec.out_length(x.shape[1]), spec.out_length(x.shape[2])))
    k, s, p = spec.kernel, spec.stride, spec.padding
    expected = (spec.out_channels, spec.in_channels, k, k)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input {x.shape} does not have {spec.in_channels} channels on axis 1")
    if weight.shape != expected:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    n_batch, _, h, w = x.shape
    ho, wo = spec.out_length(h), spec.out_length(w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = (wmat @ _im2col(xp, k, s, ho, wo)).reshape(spec.out_channels, n_batch, ho, wo)
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
        gw = (gmat @ _im2col(xp, k, s, ho, wo).T).reshape(weight.shape)
        if s == 1 and 2 * p == k - 1:
            # stride 1, same padding: input grad is a correlation with flipped, transposed kernels
            gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(spec.in_channels, -1)
            gx = (wflip @ _im2col(gp, k, 1, h, w)).reshape(spec.in_channels, n_batch, h, w)
            gx = gx.transpose(1, 0, 2, 3)
        else:
            gcols = (wmat.T @ gmat).reshape(spec.in_channels, k, k, n_batch, ho, wo)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for kh in range(k):
                for kw in range(k):
                    gxp[:, :, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s] += \
                        gcols[:, kh, kw].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, grad)


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape ``(C*k*k, N*ho*wo)``, rows ordered (c, kh, kw)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    for kh in range(k):
        for kw in range(k):
            cols[:, kh, kw] = xp[:, :, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


@dataclass
class NormState:
    """Per-channel running statistics of one batch-normalization layer."""

    running_mean: Tensor
    running_var: Tensor

    @classmethod
    def fresh(cls, channels: int) -> "NormState":
        return cls(Tensor(np.zeros(channels)), Tensor(np.ones(channels)))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: NormState, mode: str = "train",
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS, update_stats: bool = True) -> Tensor:
    """Normalize per channel (axis 1) over every other axis.

    ``train`` uses batch statistics and folds them into ``state``;
    ``infer`` uses the running statistics.
    """
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var.data.reshape(bshape) + eps)
        xhat = (x.data - state.running_mean.data.reshape(bshape)) * inv
        return _emit("batch_norm_infer", gd * xhat + bd, (x, gamma, beta),
                     lambda g: (g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)))
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    m = x.size // c
    if m < 2:
        raise ShapeError(f"batch_norm train mode needs at least 2 values per channel, got {m}")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    if update_stats:
        rm, rv = state.running_mean.data, state.running_var.data
        rm *= 1.0 - momentum
        rm += momentum * mu.reshape(c)
        rv *= 1.0 - momentum
        rv += momentum * var.reshape(c) * (m / (m - 1))

    def grad(g):
        gsum = g.sum(axis=axes, keepdims=True)
        gxhat_sum = (g * xhat).sum(axis=axes, keepdims=True)
        gx = gd * inv * (g - gsum / m - xhat * gxhat_sum / m)
        return gx, gxhat_sum.reshape(c), gsum.reshape(c)

    return _emit("batch_norm", gd * xhat + bd, (x, gamma, beta), grad)
