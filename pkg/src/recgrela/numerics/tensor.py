"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a C-contiguous float64 ndarray.  Ops executed while a
``Tape`` is active append (output, inputs, backward_fn) nodes in execution
order, which is already a topological order; ``backward`` walks the list
once in reverse and accumulates gradients into ``requires_grad`` leaves.

Broadcasting is restricted to trailing-dimension alignment: two shapes are
compatible iff they are equal or one is a suffix of the other (the shorter
operand is repeated over the missing leading axes).  Anything fancier is
rejected with a ``DimensionError``.
"""

import math

import numpy as np
from scipy.special import erf

from ..errors import BoundsError, ContractError, DimensionError, NumericError
from . import alloc

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; the single RNG family of the engine."""
    return np.random.Generator(np.random.Philox(seed))


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    """Dense n-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = alloc.register(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPES: list["Tape"] = []
_PAUSED = 0


class Tape:
    """Single-writer record of one forward pass; consumed by ``backward``."""

    def __init__(self):
        self._nodes = []  # (out, inputs tuple, backward_fn)
        self._produced = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _TAPES and _TAPES[-1] is self
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes.clear()
        self._produced.clear()

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every requires_grad leaf reachable from loss.

        Each node is visited exactly once (reverse execution order); the tape
        is consumed afterwards.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if id(loss) not in self._produced and loss.requires_grad:
            loss.accumulate_grad(grads[id(loss)])
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward_fn(g)
            for inp, gi in zip(inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    acc = grads.get(id(inp))
                    grads[id(inp)] = gi if acc is None else acc + gi
                else:
                    inp.accumulate_grad(gi)
        self.reset()


def active_tape() -> Tape | None:
    if _PAUSED or not _TAPES:
        return None
    return _TAPES[-1]


class tape_paused:
    """Temporarily disable recording (e.g. inside finite-difference probes)."""

    def __enter__(self):
        global _PAUSED
        _PAUSED += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        global _PAUSED
        _PAUSED -= 1
        return False


def record(out: Tensor, inputs, backward_fn) -> Tensor:
    """Register a custom op on the active tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in order.  No-op when no tape is active or no input needs grad.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, tuple(inputs), backward_fn))
        tape._produced.add(id(out))
    return out


def backward(loss: Tensor):
    """Run reverse-mode accumulation on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    tape.backward(loss)


# ---------------------------------------------------------------------------
# broadcasting helpers (trailing-dimension alignment only)
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_broadcast(sa: tuple, sb: tuple):
    if sa == sb:
        return
    short, long = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if long[len(long) - len(short):] != short:
        raise DimensionError(
            f"shapes {sa} and {sb} do not align on trailing dimensions")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the leading axes added by suffix broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))

    return record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    out = Tensor(e)
    return record(out, (a,), lambda g: (g * e,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "exp": exp, "neg": neg}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch pointwise op by name; binary ops require ``b``."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    fn = _ELEMENTWISE[op]
    if op in ("exp", "neg"):
        if b is not None:
            raise ContractError(f"{op} is unary")
        return fn(a)
    if b is None:
        raise ContractError(f"{op} needs two operands")
    return fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` 2-D or batched 3-D and ``b`` strictly 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} incompatible")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ b.data.T
        k = a.shape[-1]
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        return (ga, gb)

    return record(out, (a, b), bwd)


def transpose2d(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose2d needs a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return record(out, (a,), lambda g: (g.T.copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return record(out, (a,), bwd)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into looked-up rows."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise BoundsError(
            f"ids outside [0, {table.shape[0]}) in row lookup")
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record(out, (table,), bwd)


def select_position(a: Tensor, pos: int) -> Tensor:
    """Slice ``a[:, pos, :]`` from a (B, N, D) tensor."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise DimensionError(f"select_position needs (B, N, D), got {a.shape}")
    if not -a.shape[1] <= pos < a.shape[1]:
        raise BoundsError(f"position {pos} outside sequence length {a.shape[1]}")
    out = Tensor(a.data[:, pos, :].copy())

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[:, pos, :] = g
        return (ga,)

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elu(x: Tensor) -> Tensor:
    """ELU with alpha=1: x for x>=0, exp(x)-1 below."""
    x = _as_tensor(x)
    neg_part = x.data < 0
    e = np.where(neg_part, np.exp(np.minimum(x.data, 0.0)), 1.0)
    out = Tensor(np.where(neg_part, e - 1.0, x.data))
    return record(out, (x,), lambda g: (g * np.where(neg_part, e, 1.0),))


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = Tensor(x.data * s)

    def bwd(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return record(out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    return record(out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = Tensor(s)
    return record(out, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise BoundsError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    check_finite(y, "softmax output")
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record(out, (x,), bwd)


_ACTIVATIONS = {"elu": elu, "silu": silu, "gelu": gelu, "relu": relu,
                "sigmoid": sigmoid}


def activation(kind: str, x: Tensor, axis: int = -1) -> Tensor:
    """Dispatch by name; ``softmax`` takes the extra ``axis``."""
    kind = kind.lower()
    if kind == "softmax":
        return softmax(x, axis=axis)
    if kind not in _ACTIVATIONS:
        raise ContractError(f"unknown activation {kind!r}")
    return _ACTIVATIONS[kind](x)


# ---------------------------------------------------------------------------
# normalization / regularization
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-row (last axis) standardization followed by affine transform."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(check_finite(xhat * gain.data + bias.data, "layer_norm output"))

    def bwd(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes))

    return record(out, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Zero each element with prob ``rate`` and rescale survivors (training).

    Identity (the very same tensor, no RNG draw) in eval mode or at rate 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    x = _as_tensor(x)
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale)
    return record(out, (x,), lambda g: (g * keep * scale,))


def drop_path(x: Tensor, rate: float, training: bool,
              rng: np.random.Generator | None = None) -> Tensor:
    """Whole-sample stochastic depth over axis 0; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"drop_path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode drop_path needs an rng")
    x = _as_tensor(x)
    keep = (rng.random(x.shape[0]) >= rate).astype(np.float64)
    keep = keep.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale)
    return record(out, (x,), lambda g: (g * keep * scale,))
