"""Dense tensors plus a reverse-mode autodiff tape.

Storage is a row-major (C-contiguous) numpy buffer, float32 for training and
float64 for verification runs. Operations record onto the innermost active
``Tape`` whenever an input has ``requires_grad``; without an active tape they
are plain array math. Gradients are reset-then-filled on every ``backward``
call, never accumulated across calls.

Overflow is an error, not a value: elementwise ops run with the FPU overflow /
divide / invalid flags promoted to exceptions, and matmul/conv outputs are
checked for finiteness.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "tensor_create",
    "zeros",
    "full",
    "uniform",
    "from_array",
    "op_apply",
    "grad_check",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "silu",
    "tanh",
    "expm1x",
    "softmax",
    "log_softmax",
    "mean",
    "sum_",
    "reshape",
    "transpose",
    "concat",
    "gather",
    "scatter",
    "conv1d_causal",
    "layernorm",
    "broadcast_to",
    "substream",
]

FLOAT_DTYPES = (np.float32, np.float64)


class TensorError(ValueError):
    """Invalid tensor construction or operation arguments."""


class ShapeError(TensorError):
    """Operand shapes do not conform to the operation's shape rule."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN/Inf from finite inputs (overflow etc.)."""


_ERRSTATE = {"over": "raise", "divide": "raise", "invalid": "raise", "under": "ignore"}


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt.type not in FLOAT_DTYPES:
        raise TensorError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """A dense n-d array of reals with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        data = np.ascontiguousarray(data)
        _as_dtype(data.dtype)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, grad={self.requires_grad})"

    # arithmetic sugar; scalars are wrapped as same-dtype constants
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeNode:
    """One recorded primitive: inputs, output, and its vector-Jacobian rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records primitives in execution order; one backward pass per step.

    Tapes nest per thread; only the innermost records. Different threads may
    run independent tapes concurrently, but a single tape is single-threaded.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def _append(self, node: TapeNode) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))
        for t in node.inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from loss.

        Grads are overwritten (reset-then-fill). Tensors in ``params`` that do
        not reach the loss get explicit zero grads.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if id(loss) not in self._produced:
            raise TensorError("loss was not produced on this tape")
        for t in self._leaves.values():
            t.grad = None
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        with np.errstate(**_ERRSTATE):
            for node in reversed(self.nodes):
                g = grads.pop(id(node.output), None)
                if g is None:
                    continue
                if node.output.requires_grad:
                    node.output.grad = g
                input_grads = node.backward(g)
                for t, gi in zip(node.inputs, input_grads):
                    if gi is None or not t.requires_grad:
                        continue
                    acc = grads.get(id(t))
                    grads[id(t)] = gi if acc is None else acc + gi
        for t in self._leaves.values():
            if t.grad is None:
                t.grad = grads.get(id(t))
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        for t in params:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._append(TapeNode(op, inputs, out, backward))
    return out


# ---------------------------------------------------------------------------
# constructors


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise TensorError("empty shape list")
    for s in shape:
        if s < 1:
            raise TensorError(f"non-positive dimension {s} in shape {list(shape)}")
    return shape


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=_as_dtype(dtype)), requires_grad)


def full(shape, value: float, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=_as_dtype(dtype)), requires_grad)


def uniform(shape, lo: float, hi: float, rng, dtype=np.float32, requires_grad=False) -> Tensor:
    """Seeded uniform fill; ``rng`` is an int seed or a numpy Generator."""
    shape = _check_shape(shape)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(int(rng))
    data = rng.uniform(lo, hi, size=shape).astype(_as_dtype(dtype))
    return Tensor(data, requires_grad)


def from_array(values, dtype=np.float32, requires_grad=False, shape=None) -> Tensor:
    arr = np.asarray(values, dtype=_as_dtype(dtype))
    if shape is not None:
        shape = _check_shape(shape)
        if arr.size != int(np.prod(shape)):
            raise TensorError(f"value count {arr.size} does not match shape {list(shape)}")
        arr = arr.reshape(shape)
    elif arr.ndim == 0:
        arr = arr.reshape(1)
    return Tensor(arr, requires_grad)


def tensor_create(shape, init="zeros", dtype=np.float32, requires_grad=False) -> Tensor:
    """Contract-style constructor.

    ``init`` is "zeros", a float constant, a ("uniform", lo, hi, seed) tuple,
    or explicit values matching the shape.
    """
    if isinstance(init, str):
        if init != "zeros":
            raise TensorError(f"unknown init {init!r}")
        return zeros(shape, dtype, requires_grad)
    if isinstance(init, (int, float)):
        return full(shape, float(init), dtype, requires_grad)
    if isinstance(init, tuple) and len(init) == 4 and init[0] == "uniform":
        _, lo, hi, seed = init
        return uniform(shape, lo, hi, seed, dtype, requires_grad)
    return from_array(init, dtype, requires_grad, shape=shape)


def substream(seed: int, *names: str) -> np.random.Generator:
    """Named RNG substream so one config seed fans out deterministically."""
    import zlib

    keys = [int(seed)] + [zlib.crc32(n.encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence(keys))


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TensorError(f"mixed dtypes {dt} vs {t.dtype}")
    return dt


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


def _binary(op: str, a: Tensor, b: Tensor, fwd, bwd_a, bwd_b) -> Tensor:
    _check_same_dtype(a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast")
    with np.errstate(**_ERRSTATE):
        out_data = fwd(a.data, b.data)
    out = Tensor(out_data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g: np.ndarray):
        ga = _unbroadcast(bwd_a(g, a.data, b.data, out_data), a.shape) if need_a else None
        gb = _unbroadcast(bwd_b(g, a.data, b.data, out_data), b.shape) if need_b else None
        return ga, gb

    return _record(op, out, (a, b), backward)


def _unary(op: str, x: Tensor, fwd, bwd) -> Tensor:
    with np.errstate(**_ERRSTATE):
        out_data, ctx = fwd(x.data)
    out = Tensor(out_data)

    def backward(g: np.ndarray):
        return (bwd(g, x.data, out_data, ctx),)

    return _record(op, out, (x,), backward)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape[-1]} != {b.shape[-2]}")
    out_data = a.data @ b.data
    if not np.isfinite(out_data).all():
        raise NonFiniteError("matmul produced non-finite values")
    out = Tensor(out_data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g: np.ndarray):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if need_b else None
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    return _unary("exp", x, lambda v: (np.exp(v), None), lambda g, v, o, c: g * o)


def log(x: Tensor) -> Tensor:
    return _unary("log", x, lambda v: (np.log(v), None), lambda g, v, o, c: g / v)


def _sigmoid_stable(v: np.ndarray) -> np.ndarray:
    # exp argument is always <= 0, so this never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    return _unary(
        "sigmoid",
        x,
        lambda v: (_sigmoid_stable(v), None),
        lambda g, v, o, c: g * o * (1.0 - o),
    )


def softplus(x: Tensor) -> Tensor:
    # overflow-safe form: log1p(exp(-|x|)) + max(x, 0)
    return _unary(
        "softplus",
        x,
        lambda v: (np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0), None),
        lambda g, v, o, c: g * _sigmoid_stable(v),
    )


def silu(x: Tensor) -> Tensor:
    def fwd(v):
        s = _sigmoid_stable(v)
        return v * s, s

    return _unary("silu", x, fwd, lambda g, v, o, s: g * (s + v * s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    return _unary("tanh", x, lambda v: (np.tanh(v), None), lambda g, v, o, c: g * (1.0 - o * o))


def _expm1x_value(z: np.ndarray) -> np.ndarray:
    # (e^z - 1)/z; expm1(z)/z is accurate down to tiny z, only z == 0 exactly
    # needs the limit value 1
    at_zero = z == 0.0
    zsafe = np.where(at_zero, 1.0, z)
    return np.where(at_zero, 1.0, np.expm1(zsafe) / zsafe)


def _expm1x_grad(z: np.ndarray) -> np.ndarray:
    # d/dz (e^z - 1)/z = (e^z (z - 1) + 1) / z^2; the direct form cancels
    # catastrophically near 0, so switch to the series there
    small = np.abs(z) < 1e-3
    zsafe = np.where(small, 1.0, z)
    direct = (np.exp(zsafe) * (zsafe - 1.0) + 1.0) / (zsafe * zsafe)
    series = 0.5 + z * (1.0 / 3.0 + z * 0.125)
    return np.where(small, series, direct)


def expm1x(x: Tensor) -> Tensor:
    """(e^x - 1)/x, the zero-order-hold scaling factor; equals 1 at x = 0."""
    return _unary(
        "expm1x",
        x,
        lambda v: (_expm1x_value(v), None),
        lambda g, v, o, c: g * _expm1x_grad(v),
    )


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis: int, ndim: int) -> int:
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return ax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)

    def fwd(v):
        shifted = v - v.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=ax, keepdims=True), None

    def bwd(g, v, o, c):
        return o * (g - (g * o).sum(axis=ax, keepdims=True))

    return _unary("softmax", x, fwd, bwd)


def _reduce(op: str, x: Tensor, axis: int | None, keepdims: bool, is_mean: bool) -> Tensor:
    if axis is None:
        n = x.size
        with np.errstate(**_ERRSTATE):
            val = x.data.sum()
        out_data = np.asarray(val / n if is_mean else val, dtype=x.dtype).reshape(1)
        out = Tensor(out_data)

        def backward_all(g):
            scale = g.reshape(()) / n if is_mean else g.reshape(())
            return (np.full_like(x.data, scale),)

        return _record(op, out, (x,), backward_all)

    ax = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    with np.errstate(**_ERRSTATE):
        out_data = x.data.sum(axis=ax, keepdims=keepdims)
        if is_mean:
            out_data = out_data / n
    out = Tensor(out_data)
    kd_shape = tuple(1 if i == ax else s for i, s in enumerate(x.shape))

    def backward(g):
        gg = np.broadcast_to(g.reshape(kd_shape), x.shape).copy()
        if is_mean:
            gg = gg / n
        return (gg,)

    return _record(op, out, (x,), backward)


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _reduce("sum", x, axis, keepdims, is_mean=False)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _reduce("mean", x, axis, keepdims, is_mean=True)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}")
    out = Tensor(x.data.reshape(shape))
    in_shape = x.shape
    return _record("reshape", out, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {list(axes)} invalid for ndim {x.ndim}")
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype(*tensors)
    ax = _norm_axis(axis, tensors[0].ndim)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _record("concat", out, tuple(tensors), backward)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Take ``indices`` along ``axis``: out[..., i, ...] = x[..., idx[i], ...]."""
    ax = _norm_axis(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise TensorError(f"gather index out of range for axis size {x.shape[ax]}")
    out = Tensor(np.take(x.data, idx, axis=ax))
    in_shape = x.shape
    # permutations and range slices dominate; unique indices admit a direct
    # scatter assignment instead of the much slower np.add.at
    unique = idx.size == np.unique(idx).size

    def backward(g):
        gi = np.zeros(in_shape, dtype=g.dtype)
        gm = np.moveaxis(gi, ax, 0)
        if unique:
            gm[idx] = np.moveaxis(g, ax, 0)
        else:
            np.add.at(gm, idx, np.moveaxis(g, ax, 0))
        return (gi,)

    return _record("gather", out, (x,), backward)


def scatter(x: Tensor, indices, axis: int = 0, size: int | None = None) -> Tensor:
    """Inverse of gather: out[..., idx[i], ...] += x[..., i, ...].

    For a permutation index set this is exactly the gather inverse; duplicate
    indices accumulate.
    """
    ax = _norm_axis(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size != x.shape[ax]:
        raise ShapeError("scatter indices must be 1-d and match the axis length")
    n = int(size) if size is not None else idx.size
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TensorError(f"scatter index out of range for output size {n}")
    out_shape = list(x.shape)
    out_shape[ax] = n
    out_data = np.zeros(out_shape, dtype=x.dtype)
    np.add.at(np.moveaxis(out_data, ax, 0), idx, np.moveaxis(x.data, ax, 0))
    out = Tensor(out_data)

    def backward(g):
        return (np.ascontiguousarray(np.take(g, idx, axis=ax)),)

    return _record("scatter", out, (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not _broadcastable(x.shape, shape):
        raise ShapeError(f"cannot broadcast {list(x.shape)} to {list(shape)}")
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    in_shape = x.shape
    return _record("broadcast", out, (x,), lambda g: (_unbroadcast(g, in_shape),))


# ---------------------------------------------------------------------------
# structured primitives


def conv1d_causal(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal 1-d convolution.

    x: (B, L, E), weight: (E, k), bias: (E,). Output position t sees inputs
    t-k+1 .. t only (left zero padding).
    """
    _check_same_dtype(x, weight, *([bias] if bias is not None else []))
    if x.ndim != 3 or weight.ndim != 2:
        raise ShapeError("conv1d_causal expects x (B,L,E) and weight (E,k)")
    B, L, E = x.shape
    Ew, k = weight.shape
    if Ew != E:
        raise ShapeError(f"conv1d_causal: channel mismatch {Ew} != {E}")
    if bias is not None and bias.shape != (E,):
        raise ShapeError("conv1d_causal: bias must have shape (E,)")

    xp = np.concatenate([np.zeros((B, k - 1, E), dtype=x.dtype), x.data], axis=1)
    out_data = np.zeros((B, L, E), dtype=x.dtype)
    for j in range(k):
        out_data += weight.data[:, j] * xp[:, j : j + L, :]
    if bias is not None:
        out_data += bias.data
    if not np.isfinite(out_data).all():
        raise NonFiniteError("conv1d_causal produced non-finite values")
    out = Tensor(out_data)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    need_x, need_w = x.requires_grad, weight.requires_grad

    def backward(g):
        gx = gw = None
        if need_x:
            gp = np.concatenate([g, np.zeros((B, k - 1, E), dtype=g.dtype)], axis=1)
            gx = np.zeros((B, L, E), dtype=g.dtype)
            for j in range(k):
                # forward: out[t] += w[:, j] * x[t - (k-1) + j]
                gx += weight.data[:, j] * gp[:, k - 1 - j : k - 1 - j + L, :]
        if need_w:
            gw = np.zeros((E, k), dtype=g.dtype)
            for j in range(k):
                gw[:, j] = (g * xp[:, j : j + L, :]).sum(axis=(0, 1))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    return _record("conv1d_causal", out, inputs, backward)


def layernorm(x: Tensor, scale: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Layer normalization over one axis with learnable scale and bias."""
    _check_same_dtype(x, scale, bias)
    ax = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    if scale.size != n or bias.size != n:
        raise ShapeError("layernorm scale/bias must match the normalized axis")
    shape = [1] * x.ndim
    shape[ax] = n
    gamma = scale.data.reshape(shape)
    beta = bias.data.reshape(shape)

    mu = x.data.mean(axis=ax, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma + beta)

    def backward(g):
        gg = g * gamma
        m1 = gg.mean(axis=ax, keepdims=True)
        m2 = (gg * xhat).mean(axis=ax, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        red = tuple(i for i in range(x.ndim) if i != ax)
        gscale = (g * xhat).sum(axis=red).reshape(scale.shape)
        gbias = g.sum(axis=red).reshape(bias.shape)
        return gx, gscale, gbias

    return _record("layernorm", out, (x, scale, bias), backward)


# ---------------------------------------------------------------------------
# composites


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log(softmax(x)) built from primitives."""
    ax = _norm_axis(axis, x.ndim)
    shift = Tensor(x.data.max(axis=ax, keepdims=True))  # constant, no grad path needed
    shifted = sub(x, broadcast_to(shift, x.shape))
    lse = log(sum_(exp(shifted), axis=ax, keepdims=True))
    return sub(shifted, broadcast_to(lse, x.shape))


# ---------------------------------------------------------------------------
# generic dispatch (contract surface)

_OPS: dict[str, Callable] = {
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "div": lambda inputs, attrs: div(*inputs),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "exp": lambda inputs, attrs: exp(*inputs),
    "log": lambda inputs, attrs: log(*inputs),
    "softplus": lambda inputs, attrs: softplus(*inputs),
    "sigmoid": lambda inputs, attrs: sigmoid(*inputs),
    "silu": lambda inputs, attrs: silu(*inputs),
    "tanh": lambda inputs, attrs: tanh(*inputs),
    "expm1x": lambda inputs, attrs: expm1x(*inputs),
    "softmax": lambda inputs, attrs: softmax(inputs[0], axis=attrs.get("axis", -1)),
    "sum": lambda inputs, attrs: sum_(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "mean": lambda inputs, attrs: mean(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs["axes"]),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs["axis"]),
    "gather": lambda inputs, attrs: gather(inputs[0], attrs["indices"], axis=attrs.get("axis", 0)),
    "scatter": lambda inputs, attrs: scatter(
        inputs[0], attrs["indices"], axis=attrs.get("axis", 0), size=attrs.get("size")
    ),
    "depthwise_causal_conv1d": lambda inputs, attrs: conv1d_causal(*inputs),
    "layernorm": lambda inputs, attrs: layernorm(
        inputs[0], inputs[1], inputs[2], axis=attrs.get("axis", -1), eps=attrs.get("eps", 1e-5)
    ),
    "broadcast": lambda inputs, attrs: broadcast_to(inputs[0], attrs["shape"]),
}


def op_apply(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply a primitive by name; records on the active tape as usual."""
    fn = _OPS.get(kind)
    if fn is None:
        raise TensorError(f"unknown kind {kind!r}")
    return fn(list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_param: list[float] = field(default_factory=list)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4, tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic grads of scalar ``f()`` against central differences.

    rel_err = |a - n| / (|a| + |n| + 1e-12), elementwise; pass iff the max is
    below ``tol``. Use float64 parameters; float32 central differences are
    unreliable.
    """
    if eps <= 0:
        raise TensorError("eps must be positive")
    with Tape() as tape:
        out = f()
        if out.size != 1:
            raise ShapeError("grad_check requires a scalar-valued function")
        tape.backward(out, params=params)
    analytic = [p.grad.copy() for p in params]

    max_err = 0.0
    per_param = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            num[i] = (f_plus - f_minus) / (2.0 * eps)
            if not np.isfinite(num[i]):
                raise NonFiniteError("non-finite value in finite-difference evaluation")
        a_flat = a.reshape(-1)
        rel = np.abs(a_flat - num) / (np.abs(a_flat) + np.abs(num) + 1e-12)
        err = float(rel.max()) if rel.size else 0.0
        per_param.append(err)
        max_err = max(max_err, err)
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol, per_param=per_param)
