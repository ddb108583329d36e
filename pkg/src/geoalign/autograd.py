"""Dense float64 tensors with a reverse-mode gradient tape.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are recorded in execution order; :meth:`Tape.backward` replays
them in reverse.  Outside a tape every op is a plain numpy computation.

Broadcasting is deliberately narrow: an operand may be a scalar (shape
``()``) or a bias row whose shape equals the trailing axis of the other
operand.  Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "gelu",
    "clamp",
    "layer_norm",
    "sum",
    "mean",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "concat",
    "getitem",
    "take",
    "softmax",
    "log_softmax",
    "log_softmax_rows",
    "l2_normalize",
    "bilinear_sample",
    "region_average",
    "average_pool",
    "interp_weights",
]

_ids = itertools.count(1)
_local = threading.local()

LOG_FLOOR = 1e-300


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (reuse, foreign root, non-scalar root)."""


class Tensor:
    """Immutable float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Gradients(dict):
    """Mapping ``node_id -> ndarray``; also indexable by the leaf tensor itself."""

    def __init__(self, leaves: dict):
        super().__init__()
        self._leaves = leaves

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            if dict.__contains__(self, key.node_id):
                return dict.__getitem__(self, key.node_id)
            return np.zeros(key.shape)
        return dict.__getitem__(self, key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__contains__(self, key)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self._nodes: list = []
        self._known: set = set()
        self._leaves: dict = {}
        self._used = False

    def __enter__(self) -> "Tape":
        if self._used:
            raise TapeError("tape already consumed by backward()")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.node_id not in self._known:
                self._leaves[t.node_id] = t
                self._known.add(t.node_id)
        self._nodes.append((out.node_id, tuple(inputs), grad_fn))
        self._known.add(out.node_id)

    def backward(self, root: Tensor) -> Gradients:
        """Gradients of scalar ``root`` with respect to every leaf on this tape."""
        if self._used:
            raise TapeError("backward() already called on this tape")
        if root.data.size != 1 or root.ndim != 0:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        if root.node_id not in self._known:
            raise TapeError("root was not produced on this tape")
        self._used = True
        grads: dict = {root.node_id: np.ones(())}
        for out_id, inputs, grad_fn in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            in_grads = grad_fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        out = Gradients(self._leaves)
        for nid in self._leaves:
            if nid in grads:
                dict.__setitem__(out, nid, grads[nid])
        self._nodes = []
        return out


def backward(tape: Tape, root: Tensor) -> Gradients:
    return tape.backward(root)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.flags.writeable = False
    out.data = data
    out.requires_grad = False
    out.node_id = next(_ids)
    return out


def _result(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = _wrap(data)
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, grad_fn)
    return out


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 0:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "row_a"
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    """Elementwise quotient; the divisor must be nonzero (caller guards)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result(x.data + float(c), (x,), lambda g: (g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """Natural log with the argument floored at ``LOG_FLOOR``."""
    safe = np.maximum(x.data, LOG_FLOOR)
    return _result(np.log(safe), (x,), lambda g: (g / safe,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _result(out, (x,), grad_fn)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then apply per-feature gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    d = xd.shape[-1]

    def grad_fn(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},), got {gain.shape}, {bias.shape}")
    return _result(xhat * gd + bias.data, (x, gain, bias), grad_fn)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean over empty extent of shape {x.shape}")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` either shares them exactly or
    is a plain 2-D matrix applied to every batch element.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k = ad.shape[-1]
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def grad_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), grad_fn)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(ad, bd)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _result(data, tensors, grad_fn)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice / integer) indexing."""
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), grad_fn)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(x.data, idx, axis=axis), (x,), grad_fn)


def _masked(xd: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return xd
    return np.where(mask, xd, -np.inf)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the trailing axis; ``mask`` (broadcastable bool) drops entries.

    Each row must keep at least one unmasked entry.
    """
    z = _masked(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), grad_fn)


def log_softmax(x: Tensor, mask=None) -> Tensor:
    """Stable log-softmax over the trailing axis; masked entries get ``-inf``
    and receive zero gradient."""
    z = _masked(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def grad_fn(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), grad_fn)


def log_softmax_rows(x: Tensor, mask=None) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"log_softmax_rows expects n x m with m >= 1, got {x.shape}")
    return log_softmax(x, mask)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each trailing-axis vector by ``max(norm, eps)``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    out = xd / denom

    def grad_fn(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        full = (g - out * proj) / denom
        return (np.where(clipped, g / eps, full),)

    return _result(out, (x,), grad_fn)


def interp_weights(n: int, coords) -> np.ndarray:
    """Row ``i`` holds 1-D linear interpolation weights of ``coords[i]`` over
    ``n`` lattice points, coordinates clamped to ``[0, n-1]``."""
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = c - lo
    w = np.zeros((c.size, n))
    rows = np.arange(c.size)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def region_average(fmap: Tensor, row_weights, col_weights) -> Tensor:
    """Separable resampling ``R @ F @ C.T`` applied to every channel of ``fmap``.

    ``fmap`` is ``(..., h, w)``; ``row_weights`` is ``(..., p, h)`` and
    ``col_weights`` is ``(..., q, w)``, with leading axes broadcasting against
    the map's.  Returns ``(..., p, q)``.  Bilinear sampling, crop resizing,
    RoIAlign bins and rectangular average pooling are all instances of this
    with different weight matrices.
    """
    if fmap.ndim < 2:
        raise ShapeError(f"region_average needs a (..., h, w) map, got {fmap.shape}")
    R = np.asarray(row_weights, dtype=np.float64)
    C = np.asarray(col_weights, dtype=np.float64)
    h, w = fmap.shape[-2:]
    if R.shape[-1] != h or C.shape[-1] != w:
        raise ShapeError(f"weights {R.shape}/{C.shape} do not match map {fmap.shape}")
    Ct = np.swapaxes(C, -1, -2)
    out = np.matmul(np.matmul(R, fmap.data), Ct)
    shape = fmap.shape

    def grad_fn(g):
        full = np.matmul(np.matmul(np.swapaxes(R, -1, -2), g), C)
        if full.shape != shape:
            full = full.reshape((-1,) + shape).sum(axis=0)
        return (full,)

    return _result(out, (fmap,), grad_fn)


def average_pool(fmap: Tensor, rows, cols) -> Tensor:
    """Mean of ``fmap[..., rows, cols]`` over a rectangular index set -> ``(...,)``."""
    h, w = fmap.shape[-2:]
    R = np.zeros((1, h))
    C = np.zeros((1, w))
    R[0, list(rows)] = 1.0 / len(rows)
    C[0, list(cols)] = 1.0 / len(cols)
    out = region_average(fmap, R, C)
    return reshape(out, fmap.shape[:-2])


def bilinear_sample(fmap: Tensor, y: float, x: float) -> Tensor:
    """Bilinear value of a ``(c, h, w)`` map at continuous ``(y, x)``; returns ``(c,)``."""
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample expects (c, h, w), got {fmap.shape}")
    c, h, w = fmap.shape
    out = region_average(fmap, interp_weights(h, [y]), interp_weights(w, [x]))
    return reshape(out, (c,))
