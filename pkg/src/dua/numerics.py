"""Dense tensors with taped reverse-mode differentiation.

All model math is expressed through the primitives here. Each primitive
computes eagerly on numpy arrays and, when a tape is active on the current
thread, appends a record holding its inputs, its output, and a closure that
maps the output gradient to input gradients. Tensors are treated as
immutable once created; a tape belongs to a single worker thread, so
separate samples may be processed concurrently on separate tapes.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ContractError",
    "NumericsError",
    "set_default_dtype",
    "default_dtype",
    "set_debug_checks",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "add_rows",
    "tile_rows",
    "hconcat",
    "concat",
    "stack",
    "flatten",
    "transpose",
    "take",
    "put",
    "sum_all",
    "matmul",
    "apply_activation",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "log_softmax",
    "conv2d_valid",
    "maxpool2d",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Shapes of operands do not fit the operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericsError(ArithmeticError):
    """A primitive produced non-finite values (raised in debug mode)."""


_DTYPE = np.dtype(np.float64)
_DEBUG_CHECKS = False


def set_default_dtype(dtype) -> None:
    """Select the build-wide precision: float64 (verification) or float32.

    The precision is never mixed inside one graph; switch it only between
    complete forward/backward passes.
    """
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dt


def default_dtype() -> np.dtype:
    return _DTYPE


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf detection after every primitive."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """Immutable dense array with row-major contiguous storage."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: arr is already a fresh array of the build dtype.
        out = object.__new__(cls)
        out.data = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The backing array. Callers must not mutate it."""
        return self.data

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    if isinstance(shape, int):
        shape = (shape,)
    return Tensor._wrap(np.zeros(shape, dtype=_DTYPE))


# --------------------------------------------------------------------------
# Tape

# A record is (op name, input tensors, output tensor, backward closure).
# The closure receives the output gradient array and returns one gradient
# array (or None) per input, in input order.
Record = tuple[str, tuple[Tensor, ...], Tensor, Callable[[np.ndarray], tuple]]

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tape:
    """Ordered record of the primitives executed during one forward pass.

    Records are appended in execution order, so every input of a record was
    produced by an earlier record or is a leaf; the backward walk visits
    each record exactly once, in reverse.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def _emit(name: str, inputs: tuple[Tensor, ...], out_arr: np.ndarray, bwd) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_arr)):
        raise NumericsError(f"non-finite values produced by '{name}'")
    out = Tensor._wrap(out_arr)
    stack = _tape_stack()
    if stack:
        stack[-1].records.append((name, inputs, out, bwd))
    return out


# --------------------------------------------------------------------------
# Elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def add_rows(m: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rows: shapes {m.shape} and {v.shape} do not fit")
    return _emit("add_rows", (m, v), m.data + v.data, lambda g: (g, g.sum(axis=0)))


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as the rows of an (n, d) matrix."""
    if v.ndim != 1:
        raise DimensionError(f"tile_rows: expected a vector, got shape {v.shape}")
    if n < 1:
        raise ContractError(f"tile_rows: row count must be >= 1, got {n}")
    out = np.tile(v.data, (n, 1))
    return _emit("tile_rows", (v,), out, lambda g: (g.sum(axis=0),))


def hconcat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two matrices column-wise."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"hconcat: shapes {a.shape} and {b.shape} do not fit")
    p = a.shape[1]
    out = np.concatenate((a.data, b.data), axis=1)
    return _emit("hconcat", (a, b), out, lambda g: (g[:, :p], g[:, p:]))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors along axis 0."""
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat: no inputs")
    sizes = [p.shape[0] if p.ndim else 1 for p in parts]
    out = np.concatenate([p.data.reshape(s, *p.shape[1:]) for p, s in zip(parts, sizes)])
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            g[offs[i]:offs[i + 1]].reshape(parts[i].shape) for i in range(len(parts))
        )

    return _emit("concat", parts, out, bwd)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors into a new leading axis."""
    parts = tuple(parts)
    if not parts:
        raise DimensionError("stack: no inputs")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {p.shape} differ")
    out = np.stack([p.data for p in parts])
    return _emit("stack", parts, out, lambda g: tuple(g[i] for i in range(len(parts))))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("flatten", (x,), x.data.reshape(-1).copy(), lambda g: (g.reshape(shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    return _emit("transpose", (x,), np.ascontiguousarray(x.data.T), lambda g: (g.T,))


def take(x: Tensor, index) -> Tensor:
    """Gather along axis 0: an int index drops the axis, a sequence keeps it."""
    if isinstance(index, (int, np.integer)):
        i = int(index)
        if not -x.shape[0] <= i < x.shape[0]:
            raise DimensionError(f"take: index {i} out of range for shape {x.shape}")
        out = np.array(x.data[i], dtype=_DTYPE)

        def bwd_single(g):
            dx = np.zeros_like(x.data)
            dx[i] = g
            return (dx,)

        return _emit("take", (x,), out, bwd_single)

    idx = np.asarray(index, dtype=np.intp)
    out = x.data[idx].astype(_DTYPE, copy=True)

    def bwd_many(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _emit("take", (x,), out, bwd_many)


def put(x: Tensor, index, size: int) -> Tensor:
    """Scatter rows of ``x`` into a zero tensor of ``size`` leading entries.

    Indices must be distinct (inverse of ``take`` with a sequence index).
    """
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape[0] != x.shape[0]:
        raise DimensionError(f"put: {idx.shape[0]} indices for shape {x.shape}")
    out = np.zeros((size,) + x.shape[1:], dtype=_DTYPE)
    out[idx] = x.data
    return _emit("put", (x,), out, lambda g: (g[idx],))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.array(x.data.sum(), dtype=_DTYPE)
    return _emit("sum_all", (x,), out, lambda g: (np.full(shape, g, dtype=_DTYPE),))


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product supporting 2D@2D, 1D@2D, 2D@1D and 1D@1D operands."""
    ad, bd = a.data, b.data
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = ad @ bd

    def bwd(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ bd.T, ad.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, bd), g @ ad
        return g * bd, g * ad  # 1D @ 1D -> scalar

    return _emit("matmul", (a, b), np.asarray(out, dtype=_DTYPE), bwd)


# --------------------------------------------------------------------------
# Nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free at either extreme.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def apply_activation(kind: str, x: Tensor) -> Tensor:
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(x.data)
        return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))
    if kind == "relu":
        y = np.maximum(x.data, 0.0)
        return _emit("relu", (x,), y, lambda g: (g * (y > 0.0),))
    raise ContractError(f"unknown activation kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return apply_activation("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return apply_activation("tanh", x)


def relu(x: Tensor) -> Tensor:
    return apply_activation("relu", x)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax of a vector (max-subtraction before exponentiation)."""
    if x.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"softmax: expected a non-empty vector, got shape {x.shape}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    y = e / e.sum()

    def bwd(g):
        return ((g - np.dot(g, y)) * y,)

    return _emit("softmax", (x,), y, bwd)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"log_softmax: expected a non-empty vector, got shape {x.shape}")
    shifted = x.data - x.data.max()
    lse = math.log(np.exp(shifted).sum())
    y = shifted - lse
    p = np.exp(y)

    def bwd(g):
        return (g - p * g.sum(),)

    return _emit("log_softmax", (x,), y, bwd)


# --------------------------------------------------------------------------
# Convolution and pooling


def conv2d_valid(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation with stride 1 plus a scalar bias.

    Accumulates shifted slices in kernel row-major order, which makes the
    arithmetic identical to a naive per-cell loop.
    """
    if x.ndim != 2 or kernel.ndim != 2:
        raise DimensionError(
            f"conv2d_valid: expected matrices, got shapes {x.shape} and {kernel.shape}"
        )
    h, w = x.shape
    kh, kw = kernel.shape
    if kh > h or kw > w:
        raise DimensionError(
            f"conv2d_valid: kernel {kernel.shape} larger than input {x.shape}"
        )
    if bias.size != 1:
        raise DimensionError(f"conv2d_valid: bias must be scalar, got shape {bias.shape}")
    oh, ow = h - kh + 1, w - kw + 1
    xd, kd = x.data, kernel.data
    acc = np.zeros((oh, ow), dtype=_DTYPE)
    for di in range(kh):
        for dj in range(kw):
            acc += xd[di:di + oh, dj:dj + ow] * kd[di, dj]
    out = acc + bias.data.reshape(())

    def bwd(g):
        dx = np.zeros_like(xd)
        dk = np.empty_like(kd)
        for di in range(kh):
            for dj in range(kw):
                dx[di:di + oh, dj:dj + ow] += g * kd[di, dj]
                dk[di, dj] = np.sum(xd[di:di + oh, dj:dj + ow] * g)
        db = np.array(g.sum(), dtype=_DTYPE).reshape(bias.shape)
        return dx, dk, db

    return _emit("conv2d_valid", (x, kernel, bias), out, bwd)


def maxpool2d(x: Tensor, window: tuple[int, int], stride: tuple[int, int] | None = None) -> Tensor:
    """Window maxima over a matrix; ragged right/bottom windows are allowed.

    The backward pass routes each output gradient to the first (row-major)
    maximal element of its window.
    """
    if x.ndim != 2:
        raise DimensionError(f"maxpool2d: expected a matrix, got shape {x.shape}")
    ph, pw = window
    sh, sw = stride if stride is not None else window
    if ph < 1 or pw < 1 or sh < 1 or sw < 1:
        raise ContractError(f"maxpool2d: window {window} / stride {stride} must be positive")
    h, w = x.shape
    oh = -(-h // sh)
    ow = -(-w // sw)
    xd = x.data
    out = np.empty((oh, ow), dtype=_DTYPE)
    argpos = np.empty((oh, ow, 2), dtype=np.intp)
    for i in range(oh):
        r0 = i * sh
        r1 = min(r0 + ph, h)
        for j in range(ow):
            c0 = j * sw
            c1 = min(c0 + pw, w)
            patch = xd[r0:r1, c0:c1]
            flat = int(np.argmax(patch))  # first occurrence, row-major
            out[i, j] = patch.flat[flat]
            argpos[i, j, 0] = r0 + flat // (c1 - c0)
            argpos[i, j, 1] = c0 + flat % (c1 - c0)

    def bwd(g):
        dx = np.zeros_like(xd)
        np.add.at(dx, (argpos[:, :, 0].ravel(), argpos[:, :, 1].ravel()), g.ravel())
        return (dx,)

    return _emit("maxpool2d", (x,), out, bwd)


# --------------------------------------------------------------------------
# Backward pass and the finite-difference oracle


def backward(loss: Tensor, tape: Tape, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Gradients of a scalar loss for every named leaf parameter.

    Parameters that did not contribute to the loss get zero gradients of
    matching shape.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=_DTYPE)}
    for name, inputs, out, bwd in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        gs = bwd(g)
        for tin, gin in zip(inputs, gs):
            if gin is None:
                continue
            acc = grads.get(id(tin))
            if acc is None:
                grads[id(tin)] = gin if gin.flags.owndata else gin.copy()
            else:
                acc += gin
    return {
        name: Tensor._wrap(grads.get(id(p), np.zeros(p.shape, dtype=_DTYPE)))
        for name, p in params.items()
    }


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error of taped gradients against central differences.

    ``f`` must be a deterministic scalar function of ``params`` (two
    baseline evaluations are compared to detect otherwise). Parameter
    storage is perturbed in place during the sweep and restored afterwards.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ContractError(f"finite_diff_check: eps must be positive, got {eps}")
    base_a = f().item()
    base_b = f().item()
    if base_a != base_b:
        raise ContractError(
            f"finite_diff_check: f is not deterministic ({base_a!r} != {base_b!r})"
        )
    with Tape() as tape:
        value = f()
    analytic = backward(value, tape, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(ana[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana[i] - numeric) / denom)
    return worst
