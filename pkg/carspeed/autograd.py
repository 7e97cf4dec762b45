"""
Dense tensors with explicit-tape reverse-mode differentiation.

A ``Tape`` is created per forward pass. Parameters enter it through ``Tape.watch``; every
op whose inputs live on a tape records its output there together with a backward rule.
Ops on tensors that are on no tape are plain array computations.
"""

import enum
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from carspeed.errors import DimensionError, TapeError

ArrayLike = Union[np.ndarray, Sequence[float], float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

UNARY_KINDS = ("sigmoid", "tanh", "relu")
BINARY_KINDS = ("add", "sub", "mul")


class Precision(str, enum.Enum):
    """Scalar width: narrow for training/inference, wide for gradient checks"""

    NARROW = "narrow"
    WIDE = "wide"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.NARROW else np.dtype(np.float64)


class Tensor:
    """Contiguous row-major n-d array, optionally tracked on a tape"""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        *,
        tape: Optional["Tape"] = None,
        node_id: Optional[int] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: "Tensor") -> "Tensor":
        return ewise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return ewise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return ewise("mul", self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        tracked = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"


@dataclass
class _Record:
    output: int
    inputs: Tuple[Optional[int], ...]
    backward: BackwardFn


class Tape:
    """Ordered record of one forward pass; consumed by a single ``backward`` call"""

    def __init__(self):
        self._records: List[_Record] = []
        self._leaves: Dict[int, Tensor] = {}
        self._nodes: Dict[int, Tensor] = {}
        self._ids = itertools.count()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _check_open(self):
        if self._consumed:
            raise TapeError("tape was already consumed by backward(); record a new forward pass")

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a leaf; the returned tensor shares data and receives ``grad`` on backward."""
        self._check_open()
        leaf = Tensor(tensor.data, requires_grad=True, tape=self, node_id=next(self._ids))
        self._leaves[leaf.node_id] = leaf
        self._nodes[leaf.node_id] = leaf
        return leaf

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        self._check_open()
        out = Tensor(data, requires_grad=True, tape=self, node_id=next(self._ids))
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self._records.append(_Record(out.node_id, ids, backward))
        self._nodes[out.node_id] = out
        return out

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        """Reverse sweep from a scalar loss; returns {node_id: gradient} for every reached node."""
        self._check_open()
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss tensor is not on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            upstream = grads.get(rec.output)
            if upstream is None:
                continue
            for node, g in zip(rec.inputs, rec.backward(upstream)):
                if node is None or g is None:
                    continue
                grads[node] = grads[node] + g if node in grads else g

        for node_id, leaf in self._leaves.items():
            leaf.grad = grads.get(node_id, np.zeros_like(leaf.data))
            grads.setdefault(node_id, leaf.grad)
        for node_id, g in grads.items():
            node = self._nodes[node_id]
            if node.grad is None:
                node.grad = g
        return {node_id: Tensor(g) for node_id, g in grads.items()}


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise TapeError("inputs are recorded on different tapes")
    return next(iter(tapes.values()), None)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, backward)


def _unbroadcast_vector(g: np.ndarray, width: int) -> np.ndarray:
    return g.reshape(-1, width).sum(axis=0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a [...×k] · b [k×n] -> [...×n]; leading axes of ``a`` are batch axes."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} · {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        da = np.matmul(g, b.data.T)
        k, n = b.shape
        db = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        return da, db

    return _emit(out, (a, b), backward)


def ewise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Elementwise add/sub/mul (equal shapes or trailing-axis vector ``b``) and sigmoid/tanh/relu."""
    if kind in UNARY_KINDS:
        if b is not None:
            raise DimensionError(f"{kind} takes a single operand")
        x = a.data
        if kind == "sigmoid":
            y = expit(x)
            return _emit(y, (a,), lambda g: (g * y * (1 - y),))
        if kind == "tanh":
            y = np.tanh(x)
            return _emit(y, (a,), lambda g: (g * (1 - y * y),))
        y = np.maximum(x, 0)
        return _emit(y, (a,), lambda g: (g * (x > 0),))

    if kind not in BINARY_KINDS:
        raise ValueError(f"unknown elementwise kind '{kind}'")
    if b is None:
        raise DimensionError(f"{kind} needs two operands")
    vector = a.shape != b.shape
    if vector and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")

    def reduce_b(gb):
        return _unbroadcast_vector(gb, b.shape[0]) if vector else gb

    if kind == "add":
        return _emit(a.data + b.data, (a, b), lambda g: (g, reduce_b(g)))
    if kind == "sub":
        return _emit(a.data - b.data, (a, b), lambda g: (g, reduce_b(-g)))
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, reduce_b(g * a.data)))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.ndim != b.ndim:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = _norm_axis(axis, a.ndim)
    if any(sa != sb for i, (sa, sb) in enumerate(zip(a.shape, b.shape)) if i != ax):
        raise DimensionError(f"concat on axis {axis}: shapes {a.shape} and {b.shape} differ off-axis")
    split = a.shape[ax]

    def backward(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return _emit(np.concatenate([a.data, b.data], axis=ax), (a, b), backward)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("stack of an empty sequence")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DimensionError("stack: all tensors must share a shape")
    ax = _norm_axis(axis, len(shape) + 1)

    def backward(g):
        return [np.take(g, i, axis=ax) for i in range(len(tensors))]

    return _emit(np.stack([t.data for t in tensors], axis=ax), tensors, backward)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    ax = _norm_axis(axis, a.ndim)
    if not -a.shape[ax] <= index < a.shape[ax]:
        raise DimensionError(f"index {index} out of range for axis of length {a.shape[ax]}")
    idx = index % a.shape[ax]

    def backward(g):
        full = np.zeros_like(a.data)
        np.moveaxis(full, ax, 0)[idx] = g
        return (full,)

    return _emit(np.take(a.data, idx, axis=ax), (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` of the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for width {a.shape[-1]}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _emit(a.data[..., start:stop], (a,), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    return _emit(np.flip(a.data, axis=ax).copy(), (a,), lambda g: (np.flip(g, axis=ax).copy(),))


def shift(a: Tensor, offset: int, axis: int) -> Tensor:
    """out[t] = a[t + offset] along ``axis``; positions outside the input read zero."""
    ax = _norm_axis(axis, a.ndim)
    n = a.shape[ax]

    def moved(x, off):
        out = np.zeros_like(x)
        src = np.moveaxis(x, ax, 0)
        dst = np.moveaxis(out, ax, 0)
        if off >= 0 and off < n:
            dst[: n - off] = src[off:]
        elif off < 0 and -off < n:
            dst[-off:] = src[: n + off]
        return out

    return _emit(moved(a.data, offset), (a,), lambda g: (moved(g, -offset),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def reduce_sum(a: Tensor) -> Tensor:
    return _emit(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_leading(a: Tensor) -> Tensor:
    """Mean over every axis but the last: [...×C] -> [C]."""
    width = a.shape[-1]
    count = a.data.size // width
    out = a.data.reshape(-1, width).mean(axis=0)
    return _emit(out, (a,), lambda g: (np.broadcast_to(g / count, a.shape).copy(),))


def rsqrt(a: Tensor, epsilon: float = 0.0) -> Tensor:
    """1 / sqrt(a + epsilon)."""
    y = 1.0 / np.sqrt(a.data + epsilon)
    return _emit(y, (a,), lambda g: (g * -0.5 * y ** 3,))


def grad_check(
    f: Callable[[List[Tensor]], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences of ``f``.

    ``f`` maps a list of tensors to a scalar tensor and must be deterministic.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tape = Tape()
    watched = [tape.watch(p) for p in params]
    tape.backward(f(watched))

    worst = 0.0
    base = [np.array(p.data, copy=True) for p in params]
    for i, p in enumerate(params):
        analytic = watched[i].grad.reshape(-1)
        for j in range(p.data.size):
            sides = []
            for sign in (1.0, -1.0):
                arrays = [b.copy() for b in base]
                arrays[i].reshape(-1)[j] += sign * epsilon
                sides.append(f([Tensor(x) for x in arrays]).item())
            numeric = (sides[0] - sides[1]) / (2 * epsilon)
            err = abs(analytic[j] - numeric) / max(1e-8, abs(analytic[j]) + abs(numeric))
            worst = max(worst, float(err))
    return worst
