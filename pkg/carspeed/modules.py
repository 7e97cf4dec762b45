"""
Differentiable layer primitives: dense, 1-D convolution, LSTM, bidirectional LSTM,
temporal batch normalization, inverted dropout, and parameter initialization.

Sequence layers take [B×T×C] or unbatched [T×C] inputs.
"""

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Literal, Optional, Tuple

import numpy as np

from carspeed.autograd import (
    Tape,
    Tensor,
    ewise,
    concat,
    flip,
    matmul,
    mean_leading,
    reshape,
    rsqrt,
    shift,
    slice_last,
    stack,
    take,
)
from carspeed.errors import DimensionError, ModelConfigError, StatisticsError

if TYPE_CHECKING:
    from carspeed.models import LayerSpec

Mode = Literal["train", "infer"]

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5


@dataclass
class LayerParams:
    """Trainable tensors plus non-trainable buffers (batchnorm running statistics)"""

    weights: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.weights.values())

    def bind(self, tape: Tape) -> "LayerParams":
        """Watch every weight on ``tape``; buffers are shared, not copied."""
        return LayerParams({k: tape.watch(v) for k, v in self.weights.items()}, self.buffers)

    def sub(self, prefix: str) -> "LayerParams":
        """View of the entries named ``<prefix>.<name>``, prefix stripped."""
        head = prefix + "."
        return LayerParams(
            {k[len(head):]: v for k, v in self.weights.items() if k.startswith(head)},
            {k[len(head):]: v for k, v in self.buffers.items() if k.startswith(head)},
        )

    def snapshot(self) -> "LayerParams":
        return LayerParams(
            {k: Tensor(v.data.copy()) for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def restore(self, other: "LayerParams"):
        for k, v in other.weights.items():
            self.weights[k] = Tensor(v.data.copy())
        for k, v in other.buffers.items():
            self.buffers[k][...] = v


# Closed-form trainable parameter counts

def dense_param_count(d: int, h: int) -> int:
    return d * h + h


def conv1d_param_count(k: int, c_in: int, c_out: int) -> int:
    return k * c_in * c_out + c_out


def lstm_param_count(d: int, h: int) -> int:
    return 4 * (h * (d + h) + h)


def batchnorm_param_count(c: int) -> int:
    return 2 * c


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [B×T×C] or [T×C] input, got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def dense_forward(x: Tensor, p: LayerParams, activation: str = "linear") -> Tensor:
    W, b = p.weights["W"], p.weights["b"]
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"dense expects last axis {W.shape[0]}, got {x.shape}")
    y = ewise("add", matmul(x, W), b)
    if activation == "relu":
        return ewise("relu", y)
    if activation != "linear":
        raise ModelConfigError(f"unsupported dense activation '{activation}'")
    return y


def _tap_offsets(k: int, dilation: int, padding: str):
    if padding == "same":
        if k % 2 == 0:
            raise ModelConfigError(f"'same' padding needs an odd kernel, got {k}")
        half = (k - 1) // 2
        return [(j - half) * dilation for j in range(k)]
    if padding == "causal":
        return [-(k - 1 - j) * dilation for j in range(k)]
    raise ModelConfigError(f"unsupported padding '{padding}'")


def conv1d_forward(x: Tensor, p: LayerParams, padding: str = "same", dilation: int = 1) -> Tensor:
    """Output length equals input length; taps outside the sequence read zero."""
    K, b = p.weights["K"], p.weights["b"]
    k, c_in, _ = K.shape
    if dilation < 1:
        raise ModelConfigError(f"dilation must be >= 1, got {dilation}")
    offsets = _tap_offsets(k, dilation, padding)
    x3, squeeze = _as_batch(x)
    if x3.shape[1] < 1:
        raise DimensionError("conv1d on an empty sequence")
    if x3.shape[-1] != c_in:
        raise DimensionError(f"conv1d expects {c_in} input channels, got {x3.shape[-1]}")

    out = None
    for j, offset in enumerate(offsets):
        tap = x3 if offset == 0 else shift(x3, offset, axis=1)
        term = matmul(tap, take(K, j, axis=0))
        out = term if out is None else ewise("add", out, term)
    out = ewise("add", out, b)
    return _unbatch(out, squeeze)


def lstm_forward(x: Tensor, p: LayerParams, return_sequences: bool = True) -> Tensor:
    """Gate order (input, forget, cell, output); zero initial state."""
    W, U, b = p.weights["W"], p.weights["U"], p.weights["b"]
    x3, squeeze = _as_batch(x)
    batch, steps, d = x3.shape
    if steps < 1:
        raise DimensionError("lstm on an empty sequence")
    if d != W.shape[0]:
        raise DimensionError(f"lstm expects {W.shape[0]} features, got {d}")
    units = U.shape[0]

    xw = ewise("add", matmul(x3, W), b)
    h = Tensor(np.zeros((batch, units), dtype=x3.dtype))
    c = Tensor(np.zeros((batch, units), dtype=x3.dtype))
    states = []
    for t in range(steps):
        z = ewise("add", take(xw, t, axis=1), matmul(h, U))
        i = ewise("sigmoid", slice_last(z, 0, units))
        f = ewise("sigmoid", slice_last(z, units, 2 * units))
        g = ewise("tanh", slice_last(z, 2 * units, 3 * units))
        o = ewise("sigmoid", slice_last(z, 3 * units, 4 * units))
        c = ewise("add", ewise("mul", f, c), ewise("mul", i, g))
        h = ewise("mul", o, ewise("tanh", c))
        if return_sequences:
            states.append(h)

    if return_sequences:
        return _unbatch(stack(states, axis=1), squeeze)
    return reshape(h, (units,)) if squeeze else h


def bilstm_forward(
    x: Tensor, p_fwd: LayerParams, p_bwd: LayerParams, return_sequences: bool = True
) -> Tensor:
    """Forward pass plus a pass over time-reversed input, concatenated on features."""
    if x.ndim not in (2, 3):
        raise DimensionError(f"expected [B×T×C] or [T×C] input, got {x.shape}")
    time_axis = x.ndim - 2
    reversed_x = flip(x, axis=time_axis)
    if return_sequences:
        forward = lstm_forward(x, p_fwd, True)
        backward = flip(lstm_forward(reversed_x, p_bwd, True), axis=time_axis)
    else:
        forward = lstm_forward(x, p_fwd, False)
        backward = lstm_forward(reversed_x, p_bwd, False)
    return concat(forward, backward, axis=-1)


def batchnorm_forward(
    x: Tensor,
    p: LayerParams,
    mode: Mode,
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> Tensor:
    """Per-channel normalization over every axis but the last."""
    gamma, beta = p.weights["gamma"], p.weights["beta"]
    if x.shape[-1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm expects {gamma.shape[0]} channels, got {x.shape}")
    running_mean = p.buffers["running_mean"]
    running_var = p.buffers["running_var"]
    tracked = p.buffers["num_batches_tracked"]

    if mode == "train":
        mu = mean_leading(x)
        centered = ewise("sub", x, mu)
        var = mean_leading(ewise("mul", centered, centered))
        x_hat = ewise("mul", centered, rsqrt(var, epsilon))
        running_mean[...] = momentum * running_mean + (1 - momentum) * mu.data
        running_var[...] = momentum * running_var + (1 - momentum) * var.data
        tracked[...] += 1
    elif mode == "infer":
        if tracked <= 0:
            raise StatisticsError("batchnorm running statistics are uninitialized; train first")
        inv_std = (1.0 / np.sqrt(running_var + epsilon)).astype(x.dtype)
        centered = ewise("sub", x, Tensor(running_mean.astype(x.dtype)))
        x_hat = ewise("mul", centered, Tensor(inv_std))
    else:
        raise ModelConfigError(f"unknown mode '{mode}'")
    return ewise("add", ewise("mul", x_hat, gamma), beta)


def dropout_forward(
    x: Tensor, rate: float, mode: Mode, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time only."""
    if not 0 <= rate < 1:
        raise ModelConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode != "train" or rate == 0:
        return x
    if rng is None:
        raise ModelConfigError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return ewise("mul", x, Tensor(keep))


# Initialization

def _glorot(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _dense_params(d, h, rng):
    return {"W": _glorot((d, h), d, h, rng), "b": np.zeros(h)}


def _conv_params(k, c_in, c_out, rng):
    return {"K": _glorot((k, c_in, c_out), k * c_in, k * c_out, rng), "b": np.zeros(c_out)}


def _lstm_params(d, h, rng):
    W = _glorot((d, 4 * h), d, 4 * h, rng)
    U = np.concatenate([_orthogonal(h, rng) for _ in range(4)], axis=1)
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0
    return {"W": W, "U": U, "b": b}


def _bn_params(c):
    weights = {"gamma": np.ones(c), "beta": np.zeros(c)}
    buffers = {
        "running_mean": np.zeros(c),
        "running_var": np.ones(c),
        "num_batches_tracked": np.zeros(()),
    }
    return weights, buffers


def init_params(
    spec: "LayerSpec", in_features: int, rng: np.random.Generator, dtype=np.float32
) -> LayerParams:
    """Glorot-uniform kernels, orthogonal recurrent blocks, forget bias 1, batchnorm identity."""
    weights: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    kind = spec.kind
    if kind == "dense":
        weights = _dense_params(in_features, spec.units, rng)
    elif kind == "conv1d":
        weights = _conv_params(spec.kernel_size, in_features, spec.units, rng)
    elif kind == "lstm":
        weights = _lstm_params(in_features, spec.units, rng)
    elif kind == "bilstm":
        for direction in ("fwd", "bwd"):
            for name, value in _lstm_params(in_features, spec.units, rng).items():
                weights[f"{direction}.{name}"] = value
    elif kind == "batchnorm":
        weights, buffers = _bn_params(in_features)
    elif kind == "residual_block":
        f, k = spec.units, spec.kernel_size
        parts = [("conv1", _conv_params(k, in_features, f, rng)), ("conv2", _conv_params(k, f, f, rng))]
        if spec.project:
            parts.append(("proj", _conv_params(1, in_features, f, rng)))
        for prefix, values in parts:
            weights.update({f"{prefix}.{n}": v for n, v in values.items()})
        for prefix in ("bn1", "bn2"):
            w, bufs = _bn_params(f)
            weights.update({f"{prefix}.{n}": v for n, v in w.items()})
            buffers.update({f"{prefix}.{n}": v for n, v in bufs.items()})
    elif kind not in ("dropout", "relu", "take_last_step"):
        raise ModelConfigError(f"unknown layer kind '{kind}'")

    return LayerParams(
        {name: Tensor(np.asarray(v, dtype=dtype)) for name, v in weights.items()},
        {name: np.asarray(v, dtype=dtype) for name, v in buffers.items()},
    )
