"""
Training: Adam with continuous exponential learning-rate decay, global-norm clipping,
validation-driven early stopping and best-weights restore.
"""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from carspeed.autograd import Tape, Tensor
from carspeed.config import RunConfig, TrainConfig
from carspeed.data_utils import WindowedDataset, load_datasets, split_sessions, standardize
from carspeed.errors import DimensionError, ModelConfigError, NonFiniteGradientError, NonFiniteLossError, TrainingError
from carspeed.losses import mse_loss, mse_value
from carspeed.models import Model, build_model, param_count

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "seconds"]
EVAL_CHUNK = 512


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls(
            {k: np.zeros(p.shape) for k, p in params.items()},
            {k: np.zeros(p.shape) for k, p in params.items()},
        )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """initial_lr · decay_rate^(step / decay_steps), not staircased."""
    if step < 0:
        raise TrainingError(f"step must be >= 0, got {step}")
    return cfg.initial_lr * cfg.decay_rate ** (step / cfg.decay_steps)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> Dict[str, Tensor]:
    """One synchronized Adam update of every parameter; ``state.t`` advances by one.

    All gradients are validated before anything is updated.
    """
    step = state.t + 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise DimensionError(f"gradient for '{name}' has shape {np.shape(g)}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name, step)

    b1, b2 = cfg.beta1, cfg.beta2
    updated = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** step)
        v_hat = state.v[name] / (1 - b2 ** step)
        theta = p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        updated[name] = Tensor(theta.astype(p.dtype))
    state.t = step
    return updated


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm) or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}, norm


@dataclass
class TrainHistory:
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = 0
    stop_reason: str = ""

    def record(self, epoch: int, train_loss: float, val_loss: float, lr: float, seconds: float):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        self.seconds.append(seconds)

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else math.inf

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": self.epochs,
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "lr": self.lr,
                "seconds": self.seconds,
            },
            columns=HISTORY_COLUMNS,
        )

    def to_csv(self, path: Union[str, Path]):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


def validation_loss(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Loss of the raw (unclamped) infer-mode output on standardized windows."""
    pred = np.concatenate(
        [model.forward(Tensor(x[i:i + EVAL_CHUNK]), "infer").data for i in range(0, len(x), EVAL_CHUNK)]
    )
    return mse_value(pred, y)


def fit(
    model: Model,
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    cfg: TrainConfig,
) -> TrainHistory:
    """Train ``model`` in place and leave it holding the best-validation weights.

    Normalization statistics are fitted on ``train_set`` and stored on the model.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError(f"empty split (train={len(train_set)}, val={len(val_set)})")
    if train_set.window_size != model.window_size or val_set.window_size != model.window_size:
        raise ModelConfigError(
            f"{model.name} expects windows of {model.window_size} samples, "
            f"got train={train_set.window_size} val={val_set.window_size}"
        )

    dtype = model.dtype
    model.norm_stats = standardize("fit", train_set.windows)
    x_train = standardize("apply", train_set.windows, model.norm_stats).astype(dtype)
    y_train = train_set.labels.astype(dtype)
    x_val = standardize("apply", val_set.windows, model.norm_stats).astype(dtype)
    y_val = val_set.labels.astype(dtype)

    shuffle_seed, dropout_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    state = AdamState.zeros(model.named_parameters())
    history = TrainHistory()
    best_val, best_weights, since_best = math.inf, model.snapshot(), 0
    # patience counts from the last improvement larger than min_delta
    patience_ref = math.inf
    n = len(train_set)
    step = 0
    lr = lr_at(0, cfg)
    logger.info(
        "Training {} (w={}, {} params) on {} windows, validating on {}",
        model.name, model.window_size, param_count(model), n, len(val_set),
    )

    progress = tqdm(range(1, cfg.max_epochs + 1), desc=f"train {model.name}", leave=False)
    for epoch in progress:
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            index = order[start:start + cfg.batch_size]
            tape = Tape()
            bound = model.bind(tape)
            pred = model.forward(Tensor(x_train[index]), "train", dropout_rng, bound)
            loss = mse_loss(pred, Tensor(y_train[index]))
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, step + 1, value)
            tape.backward(loss)

            grads = {k: t.grad for k, t in model.named_parameters(bound).items()}
            if cfg.grad_clip is not None:
                grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
                if norm > cfg.grad_clip:
                    logger.debug("step {}: gradient norm {:.3g} clipped to {}", step + 1, norm, cfg.grad_clip)
            lr = lr_at(step, cfg)
            updated = adam_step(model.named_parameters(), grads, state, lr, cfg)
            model.assign({k: t.data for k, t in updated.items()})
            step += 1
            loss_sum += value * len(index)

        train_loss = loss_sum / n
        val_loss = validation_loss(model, x_val, y_val)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(epoch, step, val_loss)
        history.record(epoch, train_loss, val_loss, lr, time.perf_counter() - started)
        progress.set_postfix(train=f"{train_loss:.4f}", val=f"{val_loss:.4f}")

        if val_loss < best_val:
            best_val, best_weights = val_loss, model.snapshot()
            history.best_epoch = epoch
        if val_loss < patience_ref - cfg.min_delta:
            patience_ref, since_best = val_loss, 0
        else:
            since_best += 1
        if epoch % cfg.log_interval == 0 or epoch == 1:
            logger.info(
                "epoch {} | train {:.5f} | val {:.5f} | best {:.5f} (epoch {}) | lr {:.3e}",
                epoch, train_loss, val_loss, best_val, history.best_epoch, lr,
            )
        if since_best >= cfg.early_stop_patience:
            history.stop_reason = "early_stopping"
            break
    else:
        history.stop_reason = "max_epochs"

    history.steps = step
    model.restore(best_weights)
    logger.info(
        "Stopped after {} epochs ({}); best val {:.5f} at epoch {}",
        len(history.epochs), history.stop_reason, best_val, history.best_epoch,
    )
    return history


@dataclass
class TrainingRun:
    model: Model
    history: TrainHistory
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset


Splits = Tuple[WindowedDataset, WindowedDataset, WindowedDataset]


def prepare_splits(cfg: RunConfig, window_size: int, data: Optional[Union[str, Path]] = None) -> Splits:
    datasets = load_datasets(data or cfg.data_dir, cfg, window_size)
    return split_sessions(datasets, cfg.n_test_sessions, cfg.val_fraction, cfg.seed)


def train_from_config(
    cfg: RunConfig,
    model_name: Optional[str] = None,
    window_size: Optional[int] = None,
    data: Optional[Union[str, Path]] = None,
    splits: Optional[Splits] = None,
) -> TrainingRun:
    """Window the sessions, split them, build the model and fit it; ``splits`` skips the first two."""
    name = model_name or cfg.model
    w = window_size or cfg.window_size
    train_set, val_set, test_set = splits if splits is not None else prepare_splits(cfg, w, data)
    model = build_model(name, w, seed=cfg.train.seed, precision=cfg.precision)
    history = fit(model, train_set, val_set, cfg.train)
    return TrainingRun(model, history, train_set, val_set, test_set)
