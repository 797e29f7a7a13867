"""N-dimensional tensors on a dynamic reverse-mode differentiation tape.

Tensors wrap contiguous row-major numpy buffers (float32 in training mode,
float64 in verification mode). Differentiable operations append nodes to a
thread-local tape; ``backward`` walks it in reverse and accumulates gradients
into every reachable tensor, then frees the tape.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import BinaryIO, Callable, Optional, Sequence, Union

import numpy as np

from .errors import GraphError, NumericsError, ShapeError

Scalar = Union[int, float]

_TCT1_MAGIC = b"TCT1"

_state = threading.local()


def _tls():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.recording = True
        _state.graph = None
    return _state


def default_dtype() -> np.dtype:
    """Dtype used for newly created tensors (float32 unless switched)."""
    return np.dtype(_tls().dtype)


def set_default_dtype(dtype) -> None:
    """Switch the build-wide precision: ``"f32"``/``"f64"`` or a numpy dtype."""
    named = {"f32": np.float32, "f64": np.float64}
    if isinstance(dtype, str):
        if dtype not in named:
            raise ValueError(f"unknown precision {dtype!r}, expected 'f32' or 'f64'")
        dtype = named[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported tensor dtype {dtype}")
    _tls().dtype = dtype.type


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"f64"`` for gradient checks)."""
    tls = _tls()
    saved = tls.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        tls.dtype = saved


@contextmanager
def no_grad():
    """Disable tape recording; operations inside produce detached tensors."""
    tls = _tls()
    saved = tls.recording
    tls.recording = False
    try:
        yield
    finally:
        tls.recording = saved


class Tensor:
    """A shaped numeric buffer, optionally attached to the active tape.

    ``data`` is always a contiguous row-major numpy array. ``grad`` is filled
    by ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying buffer (not a copy; treat as read-only)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A tensor sharing this buffer with no graph attachment."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.node_id = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # operator sugar over the primitive ops below
    def __add__(self, other):
        return scalar_add(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return scalar_add(self, other)

    def __sub__(self, other):
        return scalar_add(self, -float(other)) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scalar_mul(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple, out: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class GradGraph:
    """Append-only tape of operations; insertion order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


def active_graph() -> Optional[GradGraph]:
    return _tls().graph


def _reset_graph() -> None:
    _tls().graph = None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable) -> Tensor:
    """Wrap an op result, guard against non-finite values, and record it.

    Every differentiable operation funnels through here so the finite-value
    invariant and tape bookkeeping live in one place.
    """
    if not np.isfinite(data).all():
        raise NumericsError(f"operation {op!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.node_id = None
    tls = _tls()
    out.requires_grad = tls.recording and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        if tls.graph is None:
            tls.graph = GradGraph()
        out.node_id = tls.graph.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    The seed gradient is 1. Fan-out accumulates additively. The tape is
    consumed: a second backward needs a fresh forward pass.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = _tls().graph
    if graph is None or loss.node_id is None or not loss.requires_grad:
        raise GraphError("loss is detached from the active graph")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(graph.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for t, gt in zip(node.inputs, grads):
                if gt is not None and t.requires_grad:
                    t.accumulate_grad(gt)
    finally:
        _reset_graph()


# ---------------------------------------------------------------------------
# primitive operations


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands carry identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents of {a.shape} and {b.shape} differ")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents of {a.shape} and {b.shape} disagree")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2)) if a.requires_grad else None
        gb = np.matmul(a.data.swapaxes(-1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_output("matmul", out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return make_output("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return make_output("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return make_output("mul", a.data * b.data,
                       (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return make_output("scalar_mul", a.data * s, (a,), lambda g: (g * s,))


def scalar_add(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return make_output("scalar_add", a.data + s, (a,), lambda g: (g,))


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1) -> Tensor:
    """Per-channel scale and shift; the only broadcast this engine allows.

    Exists solely for normalization affine terms: ``gamma`` and ``beta`` are
    1-D with length equal to ``x.shape[axis]``.
    """
    if gamma.ndim != 1 or beta.ndim != 1:
        raise ShapeError("channel_affine: gamma and beta must be 1-D")
    if gamma.shape[0] != x.shape[axis] or beta.shape[0] != x.shape[axis]:
        raise ShapeError(
            f"channel_affine: affine extents {gamma.shape}/{beta.shape} do not "
            f"match axis {axis} of {x.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bwd(g):
        gx = g * gb if x.requires_grad else None
        ggamma = (g * x.data).sum(axis=reduce_axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=reduce_axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_output("channel_affine", x.data * gb + bb, (x, gamma, beta), bwd)


def _check_axis(op: str, a: Tensor, axis) -> None:
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"{op}: axis {axis} out of range for rank {a.ndim}")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis("sum", a, axis)
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True),)

    return make_output("sum", out, (a,), bwd)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis("mean", a, axis)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).astype(a.dtype, copy=True),)

    return make_output("mean", out, (a,), bwd)


def reduce_max(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Maximum over one axis or all; gradient routes to the first argmax."""
    _check_axis("max", a, axis)
    if axis is None:
        idx = int(a.data.argmax())
        out = a.data.reshape(-1)[idx].reshape(())

        def bwd(g):
            ga = np.zeros_like(a.data)
            ga.reshape(-1)[idx] = g
            return (ga,)
    else:
        idx = np.expand_dims(a.data.argmax(axis=axis), axis)
        out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

        def bwd(g):
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
            return (ga,)

    return make_output("max", out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape} (element count differs)")
    in_shape = a.shape
    return make_output("reshape", a.data.reshape(shape), (a,),
                       lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = np.argsort(axes)
    return make_output("transpose", a.data.transpose(axes), (a,),
                       lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along one axis; gradient splits at the recorded offsets."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    _check_axis("concat", tensors[0], axis)
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis):
            raise ShapeError(
                f"concat: extents {t.shape} disagree with {tensors[0].shape} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return make_output("concat", out, tuple(tensors), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range along one axis; gradient zero-pads the complement."""
    _check_axis("slice", a, axis)
    axis = axis % a.ndim
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for extent {a.shape[axis]}")
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.ndim))

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return make_output("slice", a.data[index].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and finite near ``x``; runs in 64-bit mode
    only. Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    ``max_coords`` caps the number of (randomly sampled) coordinates probed,
    for large parameter tensors.
    """
    if x.dtype != np.float64:
        raise GraphError("finite_diff_check requires float64 tensors")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if out.size != 1:
        raise GraphError(f"finite_diff_check: f must be scalar-valued, got {out.shape}")
    backward(out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    coords = np.arange(x.size)
    if max_coords is not None and x.size > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(x.size, size=max_coords, replace=False)

    flat = probe.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(probe).item()
            flat[i] = orig - eps
            f_minus = f(probe).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericsError("finite_diff_check: non-finite f evaluation")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)


# ---------------------------------------------------------------------------
# binary tensor form: magic "TCT1", u32 rank, rank x u32 extents,
# row-major payload of little-endian float32


def write_array(arr: np.ndarray, fp: BinaryIO) -> None:
    arr = np.ascontiguousarray(arr)
    fp.write(_TCT1_MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise ShapeError(f"tensor stream truncated while reading {what}")
    return buf


def read_array(fp: BinaryIO) -> np.ndarray:
    magic = _read_exact(fp, 4, "magic")
    if magic != _TCT1_MAGIC:
        raise ShapeError(f"bad tensor magic {magic!r}, expected {_TCT1_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fp, 4, "rank"))
    if rank > 16:
        raise ShapeError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank, "extents"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fp, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fp:
        write_array(t.data, fp)


def load_tensor(path, dtype=None) -> Tensor:
    with open(path, "rb") as fp:
        arr = read_array(fp)
    return Tensor(arr, dtype=dtype or default_dtype())
