"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape records every differentiable operation as it executes.
``Tape.backward`` replays the tape in reverse, accumulating gradients in
deterministic (recording) order, so identical forward passes yield
bit-identical gradients.

Design constraints:
  * float64 everywhere; gradient checks need the precision.
  * Tensors are immutable once created (by convention: do not write to
    ``Tensor.data`` after construction) and safe to share across threads.
  * A Tape is confined to a single thread for one forward/backward pass.
  * Any non-finite value produced by an op is an error, raised immediately.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "tensor",
    "parameter",
    "record",
    "active_tape",
    "matmul",
    "add",
    "add_n",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "absolute",
    "pow_const",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "layer_norm",
    "reshape",
    "transpose",
    "getitem",
    "gather",
    "concat",
    "grad_check",
    "register_op",
    "record_op",
]

CHECK_FINITE = True

_STATE = threading.local()


class Tensor:
    """A dense float64 array plus a trainability flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; every overload routes through the recorded ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("op", "out", "inputs", "saved")

    def __init__(self, op: str, out: Tensor, inputs: tuple, saved: dict):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.saved = saved


class GradientMap:
    """Gradients keyed by tensor identity."""

    def __init__(self, store: dict, refs: dict):
        self._store = store
        self._refs = refs  # keeps tensors alive so ids stay unique

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._store[id(t)]

    def get(self, t: Tensor, default=None):
        return self._store.get(id(t), default)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store


class Tape:
    """Recorded forward operations, in execution order (a valid topological
    order of the graph by construction)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def backward(self, loss: Tensor) -> GradientMap:
        """Accumulate d(loss)/d(tensor) for every tensor on the tape.

        The loss must be scalar. Each node is visited exactly once, in
        reverse recording order; accumulation is plain summation, so the
        result is deterministic for a fixed tape.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        store: dict[int, np.ndarray] = {}
        refs: dict[int, Tensor] = {}
        store[id(loss)] = np.ones_like(loss.data)
        refs[id(loss)] = loss
        for node in reversed(self.nodes):
            g = store.get(id(node.out))
            if g is None:
                continue
            grads = _BACKWARD[node.op](node, g)
            for inp, ginp in zip(node.inputs, grads):
                if ginp is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in store:
                    store[key] = store[key] + ginp
                else:
                    store[key] = ginp
                    refs[key] = inp
        return GradientMap(store, refs)


class record:
    """Context manager activating a fresh tape on this thread."""

    def __enter__(self) -> Tape:
        self.tape = Tape()
        self.prev = getattr(_STATE, "tape", None)
        _STATE.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        _STATE.tape = self.prev
        return False


def active_tape() -> Tape | None:
    return getattr(_STATE, "tape", None)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finish(op: str, out_data: np.ndarray, inputs: tuple, saved: dict) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    tape = getattr(_STATE, "tape", None)
    track = tape is not None and any(
        isinstance(i, Tensor) and i.requires_grad for i in inputs
    )
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(_Node(op, out, inputs, saved))
    return out


def record_op(op: str, out_data: np.ndarray, inputs: Sequence, saved: dict | None = None) -> Tensor:
    """Record an externally defined op (see ``register_op``)."""
    return _finish(op, out_data, tuple(inputs), saved or {})


def register_op(op: str, backward_fn: Callable) -> None:
    """Register the backward rule for an op recorded via ``record_op``.

    ``backward_fn(node, out_grad)`` must return one gradient array (or
    None) per node input, in input order.
    """
    _BACKWARD[op] = backward_fn


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b) -> Tensor:
    """Matrix product. 2-D a @ 2-D b, or batched with identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim != b.data.ndim or (
        a.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]
    ):
        raise ValueError(f"matmul requires matching batch dims: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _finish("matmul", out, (a, b), {})


def _matmul_bwd(node, g):
    a, b = node.inputs
    ga = g @ np.swapaxes(b.data, -1, -2)
    gb = np.swapaxes(a.data, -1, -2) @ g
    return ga, gb


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _finish("add", a.data + b.data, (a, b), {})


def _add_bwd(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)


def add_n(tensors: Iterable) -> Tensor:
    """Sum of equal-shaped tensors as a single node."""
    ts = tuple(_as_tensor(t) for t in tensors)
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data
    return _finish("add_n", out, ts, {})


def _add_n_bwd(node, g):
    return tuple(g for _ in node.inputs)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _finish("sub", a.data - b.data, (a, b), {})


def _sub_bwd(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _finish("mul", a.data * b.data, (a, b), {})


def _mul_bwd(node, g):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _finish("div", a.data / b.data, (a, b), {})


def _div_bwd(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g / b.data, a.data.shape)
    gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
    return ga, gb


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _finish("neg", -x.data, (x,), {})


def _neg_bwd(node, g):
    return (-g,)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    return _finish("relu", np.maximum(x.data, 0.0), (x,), {})


def _relu_bwd(node, g):
    return (g * (node.inputs[0].data > 0.0),)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _finish("sigmoid", out, (x,), {"y": out})


def _sigmoid_bwd(node, g):
    y = node.saved["y"]
    return (g * y * (1.0 - y),)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _finish("exp", out, (x,), {"y": out})


def _exp_bwd(node, g):
    return (g * node.saved["y"],)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log of non-positive value")
    return _finish("log", np.log(x.data), (x,), {})


def _log_bwd(node, g):
    return (g / node.inputs[0].data,)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    return _finish("abs", np.abs(x.data), (x,), {})


def _abs_bwd(node, g):
    return (g * np.sign(node.inputs[0].data),)


def pow_const(x, p: float) -> Tensor:
    """x ** p for a fixed real exponent (x >= 0 when p is non-integral)."""
    x = _as_tensor(x)
    return _finish("pow_const", np.power(x.data, p), (x,), {"p": float(p)})


def _pow_const_bwd(node, g):
    p = node.saved["p"]
    x = node.inputs[0].data
    return (g * p * np.power(x, p - 1.0),)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through wherever x lies inside."""
    x = _as_tensor(x)
    return _finish("clip", np.clip(x.data, lo, hi), (x,), {"lo": lo, "hi": hi})


def _clip_bwd(node, g):
    x = node.inputs[0].data
    mask = (x >= node.saved["lo"]) & (x <= node.saved["hi"])
    return (g * mask,)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _finish("sum", np.asarray(out), (x,), {"axis": axis, "keepdims": keepdims})


def _sum_bwd(node, g):
    x = node.inputs[0].data
    axis = node.saved["axis"]
    if axis is not None and not node.saved["keepdims"]:
        axes = axis if isinstance(axis, tuple) else (axis,)
        g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
    return (np.broadcast_to(g, x.shape).copy(),)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x, axis: int = -1) -> Tensor:
    """Stabilized softmax: exponentials of max-shifted inputs, normalized."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _finish("softmax", out, (x,), {"y": out, "axis": axis})


def _softmax_bwd(node, g):
    y = node.saved["y"]
    axis = node.saved["axis"]
    dot = (g * y).sum(axis=axis, keepdims=True)
    return (y * (g - dot),)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    return _finish("layer_norm", out, (x, gain, bias), {"xhat": xhat, "inv": inv})


def _layer_norm_bwd(node, g):
    x, gain, bias = node.inputs
    xhat = node.saved["xhat"]
    inv = node.saved["inv"]
    n = x.data.shape[-1]
    gy = g * gain.data
    gx = inv * (
        gy
        - gy.mean(axis=-1, keepdims=True)
        - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
    )
    ggain = _unbroadcast(g * xhat, gain.data.shape)
    gbias = _unbroadcast(g, bias.data.shape)
    return gx, ggain, gbias


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _finish("reshape", x.data.reshape(shape), (x,), {"shape": x.data.shape})


def _reshape_bwd(node, g):
    return (g.reshape(node.saved["shape"]),)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    return _finish("transpose", np.transpose(x.data, axes), (x,), {"axes": axes})


def _transpose_bwd(node, g):
    axes = node.saved["axes"]
    inverse = np.argsort(axes)
    return (np.transpose(g, inverse),)


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing only; each input element selected at most once."""
    x = _as_tensor(x)
    return _finish("getitem", np.ascontiguousarray(x.data[index]), (x,), {"index": index})


def _getitem_bwd(node, g):
    out = np.zeros_like(node.inputs[0].data)
    out[node.saved["index"]] = g
    return (out,)


def gather(x, indices) -> Tensor:
    """Select rows along axis 0 by integer index (repeats allowed)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    return _finish("gather", x.data[idx], (x,), {"idx": idx})


def _gather_bwd(node, g):
    out = np.zeros_like(node.inputs[0].data)
    np.add.at(out, node.saved["idx"], g)
    return (out,)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    return _finish("concat", out, ts, {"axis": axis, "sizes": sizes})


def _concat_bwd(node, g):
    axis = node.saved["axis"]
    splits = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


_BACKWARD: dict[str, Callable] = {
    "matmul": _matmul_bwd,
    "add": _add_bwd,
    "add_n": _add_n_bwd,
    "sub": _sub_bwd,
    "mul": _mul_bwd,
    "div": _div_bwd,
    "neg": _neg_bwd,
    "relu": _relu_bwd,
    "sigmoid": _sigmoid_bwd,
    "exp": _exp_bwd,
    "log": _log_bwd,
    "abs": _abs_bwd,
    "pow_const": _pow_const_bwd,
    "clip": _clip_bwd,
    "sum": _sum_bwd,
    "softmax": _softmax_bwd,
    "layer_norm": _layer_norm_bwd,
    "reshape": _reshape_bwd,
    "transpose": _transpose_bwd,
    "getitem": _getitem_bwd,
    "gather": _gather_bwd,
    "concat": _concat_bwd,
}


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare the taped gradient of scalar-valued ``f`` at ``x`` against
    central finite differences.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    When ``max_coords`` is given, a seeded random subset of coordinates is
    checked instead of all of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with record() as tape:
        out = f(probe)
    grads = tape.backward(out)
    analytic = grads.get(probe)
    if analytic is None:
        analytic = np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = np.random.default_rng(seed)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    base = flat.copy()
    for i in coords:
        plus = base.copy()
        plus[i] += step
        minus = base.copy()
        minus[i] -= step
        fp = float(f(Tensor(plus.reshape(x.data.shape))).data)
        fm = float(f(Tensor(minus.reshape(x.data.shape))).data)
        numeric = (fp - fm) / (2.0 * step)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
