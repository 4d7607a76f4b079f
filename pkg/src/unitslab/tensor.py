"""Deterministic tensor algebra with reverse-mode differentiation.

Values are dense float64 arrays, immutable after construction. Gradients are
computed by recording operations on an explicit :class:`Tape` (activated as a
context manager) and replaying it backwards. One tape per worker thread; a
fresh tape is opened for every optimization step and discarded afterwards.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

# Predictions are clamped into [BCE_EPS, 1 - BCE_EPS] before taking logs.
BCE_EPS = 1e-7

# When True, every operation output is checked for NaN/Inf.
DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Operand shapes are not conformable for the requested operation."""


class TapeError(RuntimeError):
    """Gradient bookkeeping was asked for something the tape cannot do."""


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if not a.flags.owndata:
        a = a.copy()
    a.flags.writeable = False
    return a


class Tensor:
    """Immutable dense array of float64 values, optionally grad-tracked."""

    __slots__ = ("data", "requires_grad", "name", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (got NaN or Inf)")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id: int | None = None
        self._tape: "Tape | None" = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Wrap an op result without re-copying; debug mode re-validates."""
        if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise AssertionError("non-finite value produced by an operation")
        t = cls.__new__(cls)
        t.data = _freeze(arr)
        t.requires_grad = requires_grad
        t.name = None
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{grad}{name})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    saved: tuple[Any, ...]


class Tape:
    """Append-only record of operations; acyclic because inputs precede outputs."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._leaf_names: set[str] = set()
        self._leaves: list[tuple[int, str, tuple[int, ...]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def _register_leaf(self, t: Tensor) -> int:
        if t.name is None:
            raise TapeError("a requires_grad leaf must carry a name before entering the tape")
        if t.name in self._leaf_names:
            raise TapeError(f"duplicate leaf name on tape: {t.name!r}")
        node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), (t.name, t.shape)))
        self._leaf_names.add(t.name)
        self._leaves.append((node_id, t.name, t.shape))
        t.node_id = node_id
        t._tape = self
        return node_id

    def _input_id(self, t: Tensor) -> int:
        """Node id of ``t`` on this tape, registering it as a leaf if needed."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad:
            return self._register_leaf(t)
        return -1  # constant: no gradient flows into it

    def _record(self, op: str, inputs: Sequence[Tensor], saved: tuple, out: Tensor) -> None:
        ids = tuple(self._input_id(t) for t in inputs)
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(TapeNode(op, ids, saved))


def _maybe_record(op: str, inputs: Sequence[Tensor], saved: tuple, out: Tensor) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(op, inputs, saved, out)
    return out


def detach(t: Tensor) -> Tensor:
    """Value-identical tensor with no gradient tracking (stop-gradient)."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.name = None
    out.node_id = None
    out._tape = None
    return out


# ---------------------------------------------------------------------------
# forward primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor._wrap(a.data + b.data, a.requires_grad or b.requires_grad)
    return _maybe_record("add", (a, b), (), out)


def scale(t: Tensor, k: float) -> Tensor:
    k = float(k)
    out = Tensor._wrap(t.data * k, t.requires_grad)
    return _maybe_record("scale", (t,), (k,), out)


def relu(t: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(t.data, 0.0), t.requires_grad)
    return _maybe_record("relu", (t,), (t.data,), out)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-np.abs(x)))
    y = np.where(x >= 0, pos, 1.0 - pos)
    out = Tensor._wrap(y, t.requires_grad)
    return _maybe_record("sigmoid", (t,), (out.data,), out)


def mean_reduce(t: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(t.data.mean()), t.requires_grad)
    return _maybe_record("mean_reduce", (t,), (t.shape, t.size), out)


def masked_bce(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean binary cross-entropy over mask==1 positions; 0.0 if none are valid.

    Targets must be exactly 0 or 1; predictions are clamped to
    [BCE_EPS, 1 - BCE_EPS] before the logs are taken.
    """
    if not (pred.shape == target.shape == mask.shape):
        raise ShapeError(
            f"masked_bce: shapes differ (pred {pred.shape}, target {target.shape}, mask {mask.shape})"
        )
    tvals = target.data
    if not np.all((tvals == 0.0) | (tvals == 1.0)):
        raise ValueError("masked_bce: targets must be exactly 0 or 1")
    m = mask.data
    count = float(m.sum())
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    if count == 0.0:
        val = np.asarray(0.0)
    else:
        ll = tvals * np.log(p) + (1.0 - tvals) * np.log1p(-p)
        val = np.asarray(-(m * ll).sum() / count)
    out = Tensor._wrap(val, pred.requires_grad)
    return _maybe_record("masked_bce", (pred,), (pred.data, tvals, m, count), out)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N*H*W, C*9) patch matrix for a 3x3, stride-1, pad-1 conv."""
    n, c, h, w = x.shape
    xp = _pad1(x)
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, h, w, c, 3, 3), strides=(sn, sh, sw, sc, sh, sw), writeable=False
    )
    return view.reshape(n * h * w, c * 9)


def _conv3_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlation, 3x3 kernel, stride 1, zero pad 1. Shapes (N,C,H,W),(O,C,3,3)."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col3(x)
    y = cols @ w.reshape(o, c * 9).T
    return np.ascontiguousarray(y.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2-D convolution: 3x3 kernel, stride 1, zero padding 1, multi-channel.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, 3, 3), ``bias`` is (O,).
    Output is (N, O, H, W).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be (N,C,H,W), got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: weight must be (O,C,3,3), got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({weight.shape[0]},)")
    y = _conv3_raw(x.data, weight.data) + bias.data[None, :, None, None]
    out = Tensor._wrap(y, x.requires_grad or weight.requires_grad or bias.requires_grad)
    return _maybe_record("conv2d", (x, weight, bias), (x.data, weight.data), out)


# ---------------------------------------------------------------------------
# reverse pass


def _bw_add(node: TapeNode, adj: np.ndarray):
    return adj, adj


def _bw_scale(node: TapeNode, adj: np.ndarray):
    (k,) = node.saved
    return (adj * k,)


def _bw_relu(node: TapeNode, adj: np.ndarray):
    (x,) = node.saved
    return (adj * (x > 0.0),)


def _bw_sigmoid(node: TapeNode, adj: np.ndarray):
    (y,) = node.saved
    return (adj * y * (1.0 - y),)


def _bw_mean_reduce(node: TapeNode, adj: np.ndarray):
    shape, size = node.saved
    return (np.full(shape, float(adj) / size),)


def _bw_masked_bce(node: TapeNode, adj: np.ndarray):
    pred, target, mask, count = node.saved
    if count == 0.0:
        return (np.zeros_like(pred),)
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    inside = (pred > BCE_EPS) & (pred < 1.0 - BCE_EPS)
    g = mask * inside * (p - target) / (p * (1.0 - p)) / count
    return (g * float(adj),)


def _bw_conv2d(node: TapeNode, adj: np.ndarray):
    x, w = node.saved
    n, c, h, wd = x.shape
    o = w.shape[0]
    g2 = adj.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
    grad_b = g2.sum(axis=0)
    grad_w = (g2.T @ _im2col3(x)).reshape(o, c, 3, 3)
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = _conv3_raw(adj, w_rot)
    return grad_x, grad_w, grad_b


_BACKWARD = {
    "add": _bw_add,
    "scale": _bw_scale,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "mean_reduce": _bw_mean_reduce,
    "masked_bce": _bw_masked_bce,
    "conv2d": _bw_conv2d,
}


def backward(loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar loss for every named requires_grad leaf on its tape.

    Leaves cut off from the loss (e.g. behind a detach) receive zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise TapeError("backward: loss is not attached to a live tape")
    adjoints: list[np.ndarray | None] = [None] * len(tape.nodes)
    adjoints[loss.node_id] = np.ones_like(loss.data)
    for node_id in range(loss.node_id, -1, -1):
        adj = adjoints[node_id]
        if adj is None:
            continue
        node = tape.nodes[node_id]
        if node.op == "leaf":
            continue
        grads = _BACKWARD[node.op](node, adj)
        for input_id, g in zip(node.inputs, grads):
            if input_id < 0:
                continue
            if adjoints[input_id] is None:
                adjoints[input_id] = g
            else:
                adjoints[input_id] = adjoints[input_id] + g
    result: dict[str, Tensor] = {}
    for node_id, name, shape in tape._leaves:
        g = adjoints[node_id]
        if g is None:
            g = np.zeros(shape)
        result[name] = Tensor._wrap(np.asarray(g), False)
    return result
