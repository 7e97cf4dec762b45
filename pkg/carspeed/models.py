"""
Model zoo: CarSpeedNet and the five exploration baselines, built from ``LayerSpec`` stacks.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from carspeed.autograd import Precision, Tape, Tensor, ewise, reshape, take
from carspeed.data_utils import NormStats, standardize
from carspeed.errors import DimensionError, ModelConfigError, NormalizationError
from carspeed.modules import (
    LayerParams,
    Mode,
    batchnorm_forward,
    batchnorm_param_count,
    bilstm_forward,
    conv1d_forward,
    conv1d_param_count,
    dense_forward,
    dense_param_count,
    dropout_forward,
    init_params,
    lstm_forward,
    lstm_param_count,
)

INPUT_AXES = 3
MIN_WINDOW = 5

# Trainable-parameter totals quoted for each architecture; the zoo approaches them.
TARGET_PARAM_COUNTS = {
    "carspeednet": 178_169,
    "dnn_star": 13_031,
    "lstm": 17_181,
    "wavenet": 239_937,
    "bilstm": 26_251,
    "resnet": 95_043,
}

LAYER_KINDS = (
    "dense", "conv1d", "lstm", "bilstm", "batchnorm", "dropout", "relu", "take_last_step", "residual_block",
)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a stack; ``units`` doubles as filter count for convolutions"""

    kind: str
    units: int = 0
    kernel_size: int = 1
    dilation: int = 1
    padding: str = "same"
    activation: str = "linear"
    rate: float = 0.0
    return_sequences: bool = True
    project: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelConfigError(f"unknown layer kind '{self.kind}'")

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "LayerSpec":
        return cls(**data)


def _bn() -> LayerSpec:
    return LayerSpec("batchnorm")


def _carspeednet() -> List[LayerSpec]:
    return [
        LayerSpec("bilstm", units=100),
        _bn(),
        LayerSpec("lstm", units=50),
        _bn(),
        LayerSpec("lstm", units=20),
        _bn(),
        LayerSpec("lstm", units=20),
        _bn(),
        LayerSpec("lstm", units=20),
        _bn(),
        LayerSpec("conv1d", units=64, kernel_size=3, activation="relu"),
        LayerSpec("conv1d", units=64, kernel_size=3, activation="relu"),
        LayerSpec("conv1d", units=32, kernel_size=3, activation="relu"),
        LayerSpec("take_last_step"),
        LayerSpec("dense", units=32, activation="relu"),
        LayerSpec("dense", units=1),
    ]


def _dnn_star() -> List[LayerSpec]:
    return [
        LayerSpec("lstm", units=16),
        LayerSpec("bilstm", units=16),
        LayerSpec("bilstm", units=16, return_sequences=False),
        LayerSpec("dense", units=1),
    ]


def _lstm() -> List[LayerSpec]:
    return [
        LayerSpec("lstm", units=32),
        _bn(),
        LayerSpec("dropout", rate=0.2),
        LayerSpec("lstm", units=24),
        _bn(),
        LayerSpec("dropout", rate=0.2),
        LayerSpec("lstm", units=16, return_sequences=False),
        LayerSpec("dense", units=1),
    ]


WAVENET_WIDTH = 154
WAVENET_DILATIONS = (1, 2, 4, 8, 16, 32)


def _wavenet() -> List[LayerSpec]:
    stack = [
        LayerSpec("conv1d", units=WAVENET_WIDTH, kernel_size=2, dilation=d, padding="causal", activation="relu")
        for d in WAVENET_DILATIONS
    ]
    return stack + [LayerSpec("conv1d", units=1, kernel_size=1), LayerSpec("take_last_step")]


def _bilstm() -> List[LayerSpec]:
    return [
        LayerSpec("bilstm", units=32),
        LayerSpec("dropout", rate=0.2),
        LayerSpec("lstm", units=24, return_sequences=False),
        LayerSpec("dense", units=1),
    ]


def _resnet() -> List[LayerSpec]:
    return [
        LayerSpec("residual_block", units=32, kernel_size=3, project=True),
        LayerSpec("residual_block", units=32, kernel_size=3),
        LayerSpec("bilstm", units=32, return_sequences=False),
        LayerSpec("dense", units=1),
    ]


ARCHITECTURES = {
    "carspeednet": _carspeednet,
    "dnn_star": _dnn_star,
    "lstm": _lstm,
    "wavenet": _wavenet,
    "bilstm": _bilstm,
    "resnet": _resnet,
}


def infer_widths(specs: Sequence[LayerSpec], in_features: int = INPUT_AXES) -> List[int]:
    """Input feature width of every layer; raises if adjacent layers are incompatible."""
    sequence, width = True, in_features
    widths = []
    for i, spec in enumerate(specs):
        widths.append(width)
        needs_sequence = spec.kind in ("conv1d", "lstm", "bilstm", "take_last_step", "residual_block")
        if needs_sequence and not sequence:
            raise ModelConfigError(f"layer {i} ({spec.kind}) needs a sequence input")
        if spec.kind in ("dense", "conv1d"):
            width = spec.units
        elif spec.kind == "lstm":
            width, sequence = spec.units, spec.return_sequences
        elif spec.kind == "bilstm":
            width, sequence = 2 * spec.units, spec.return_sequences
        elif spec.kind == "take_last_step":
            sequence = False
        elif spec.kind == "residual_block":
            if not spec.project and width != spec.units:
                raise ModelConfigError(f"layer {i}: residual skip of width {width} into {spec.units} needs a projection")
            width = spec.units
    if sequence or width != 1:
        raise ModelConfigError("stack must end in a single scalar per window")
    return widths


def layer_param_count(spec: LayerSpec, in_features: int) -> int:
    """Closed-form trainable count for one layer."""
    if spec.kind == "dense":
        return dense_param_count(in_features, spec.units)
    if spec.kind == "conv1d":
        return conv1d_param_count(spec.kernel_size, in_features, spec.units)
    if spec.kind == "lstm":
        return lstm_param_count(in_features, spec.units)
    if spec.kind == "bilstm":
        return 2 * lstm_param_count(in_features, spec.units)
    if spec.kind == "batchnorm":
        return batchnorm_param_count(in_features)
    if spec.kind == "residual_block":
        f, k = spec.units, spec.kernel_size
        total = conv1d_param_count(k, in_features, f) + conv1d_param_count(k, f, f) + 2 * batchnorm_param_count(f)
        if spec.project:
            total += conv1d_param_count(1, in_features, f)
        return total
    return 0


def closed_form_param_count(specs: Sequence[LayerSpec], in_features: int = INPUT_AXES) -> int:
    widths = infer_widths(specs, in_features)
    return sum(layer_param_count(spec, w) for spec, w in zip(specs, widths))


@dataclass
class Model:
    name: str
    window_size: int
    specs: List[LayerSpec]
    params: List[LayerParams]
    norm_stats: Optional[NormStats] = None
    precision: Precision = Precision.NARROW

    @property
    def dtype(self) -> np.dtype:
        return self.precision.dtype

    def bind(self, tape: Tape) -> List[LayerParams]:
        return [p.bind(tape) for p in self.params]

    def named_parameters(self, params: Optional[List[LayerParams]] = None) -> Dict[str, Tensor]:
        """Trainable tensors keyed ``<layer index>.<name>``."""
        params = self.params if params is None else params
        return {f"{i}.{name}": t for i, p in enumerate(params) for name, t in p.weights.items()}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{name}": b for i, p in enumerate(self.params) for name, b in p.buffers.items()}

    def assign(self, values: Dict[str, np.ndarray]):
        """Replace trainable tensors from a ``named_parameters``-keyed mapping."""
        for key, value in values.items():
            index, name = key.split(".", 1)
            self.params[int(index)].weights[name] = Tensor(np.asarray(value, dtype=self.dtype))

    def snapshot(self) -> List[LayerParams]:
        return [p.snapshot() for p in self.params]

    def restore(self, snapshot: List[LayerParams]):
        for target, source in zip(self.params, snapshot):
            target.restore(source)

    def check_input(self, x: Tensor):
        if x.ndim != 3 or x.shape[1:] != (self.window_size, INPUT_AXES):
            raise DimensionError(
                f"{self.name} expects [batch×{self.window_size}×{INPUT_AXES}] windows, got {x.shape}"
            )

    def forward(
        self,
        x: Tensor,
        mode: Mode = "infer",
        rng: Optional[np.random.Generator] = None,
        params: Optional[List[LayerParams]] = None,
    ) -> Tensor:
        """Standardized windows [B×w×3] -> raw speeds [B]; ``params`` defaults to the model's own."""
        self.check_input(x)
        params = self.params if params is None else params
        h = x
        for spec, p in zip(self.specs, params):
            h = _layer_forward(spec, h, p, mode, rng)
        return reshape(h, (h.shape[0],))


def _layer_forward(spec: LayerSpec, x: Tensor, p: LayerParams, mode: Mode, rng) -> Tensor:
    kind = spec.kind
    if kind == "dense":
        return dense_forward(x, p, spec.activation)
    if kind == "conv1d":
        y = conv1d_forward(x, p, spec.padding, spec.dilation)
        return ewise("relu", y) if spec.activation == "relu" else y
    if kind == "lstm":
        return lstm_forward(x, p, spec.return_sequences)
    if kind == "bilstm":
        return bilstm_forward(x, p.sub("fwd"), p.sub("bwd"), spec.return_sequences)
    if kind == "batchnorm":
        return batchnorm_forward(x, p, mode)
    if kind == "dropout":
        return dropout_forward(x, spec.rate, mode, rng)
    if kind == "relu":
        return ewise("relu", x)
    if kind == "take_last_step":
        return take(x, -1, axis=1)
    if kind == "residual_block":
        skip = conv1d_forward(x, p.sub("proj")) if spec.project else x
        y = conv1d_forward(x, p.sub("conv1"))
        y = ewise("relu", batchnorm_forward(y, p.sub("bn1"), mode))
        y = batchnorm_forward(conv1d_forward(y, p.sub("conv2")), p.sub("bn2"), mode)
        return ewise("relu", ewise("add", y, skip))
    raise ModelConfigError(f"unknown layer kind '{kind}'")


def build_model(
    name: str,
    window_size: int,
    seed: int = 0,
    precision: Precision = Precision.NARROW,
) -> Model:
    if name not in ARCHITECTURES:
        raise ModelConfigError(f"unknown model '{name}'; choose from {', '.join(ARCHITECTURES)}")
    if window_size < MIN_WINDOW:
        raise ModelConfigError(f"window_size must be >= {MIN_WINDOW}, got {window_size}")
    precision = Precision(precision)
    specs = ARCHITECTURES[name]()
    widths = infer_widths(specs)
    rng = np.random.default_rng(seed)
    params = [init_params(spec, w, rng, precision.dtype) for spec, w in zip(specs, widths)]
    model = Model(name, window_size, specs, params, precision=precision)
    logger.debug(
        "Built {} (window={}, params={}, target={})",
        name, window_size, param_count(model), TARGET_PARAM_COUNTS[name],
    )
    return model


def param_count(m: Model) -> int:
    """Trainable parameters only; running statistics are excluded."""
    return sum(p.trainable_count() for p in m.params)


def predict(m: Model, windows: np.ndarray, chunk_size: int = 256) -> np.ndarray:
    """Raw [B×w×3] specific-force windows (m/s²) -> non-negative speeds (m/s)."""
    windows = np.asarray(windows)
    if windows.ndim != 3 or windows.shape[1:] != (m.window_size, INPUT_AXES):
        raise DimensionError(f"{m.name} expects [batch×{m.window_size}×{INPUT_AXES}] windows, got {windows.shape}")
    if m.norm_stats is None:
        raise NormalizationError("model has no normalization statistics; fit or load them first")
    x = standardize("apply", windows, m.norm_stats).astype(m.dtype)
    speeds = [
        m.forward(Tensor(x[start:start + chunk_size]), "infer").data
        for start in range(0, len(x), chunk_size)
    ]
    out = np.concatenate(speeds) if speeds else np.zeros(0, dtype=m.dtype)
    return np.maximum(out, 0)


def describe(m: Model) -> List[Tuple[str, int]]:
    """(layer kind, trainable count) per layer, for logs and the compare report."""
    return [(spec.kind, p.trainable_count()) for spec, p in zip(m.specs, m.params)]
