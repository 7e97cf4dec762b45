"""
Evaluation: RMSE / MAE, single-window latency, window-size sweep, model comparison and
speed traces, plus speed-band, standstill and over-speed views of a trace.
"""

import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from carspeed.config import MODEL_NAMES, RunConfig
from carspeed.data_utils import WindowedDataset
from carspeed.errors import CarSpeedError, MetricsError, ModelConfigError, SweepError
from carspeed.models import TARGET_PARAM_COUNTS, Model, param_count, predict
from carspeed.train import prepare_splits, train_from_config

SAMPLE_RATE_HZ = 20.0
SWEEP_COLUMNS = ["model", "window_samples", "window_seconds", "rmse_mps", "mae_mps", "latency_ms", "param_count"]
COMPARE_COLUMNS = SWEEP_COLUMNS + ["target_param_count"]
TRACE_COLUMNS = ["t", "gt_speed", "pred_speed"]
COMPARE_WINDOW = 20

# Speed bands (m/s): standstill, urban traffic, open road
STATIONARY_MPS = 0.5
URBAN_MAX_MPS = 15.0
BANDS = ("stationary", "urban", "highway")


def _pair(gt, pred) -> Tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    if len(gt) != len(pred):
        raise MetricsError(f"length mismatch: {len(gt)} ground-truth vs {len(pred)} predicted")
    if len(gt) == 0:
        raise MetricsError("metrics need at least one sample")
    return gt, pred


def rmse(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.sqrt(np.mean((gt - pred) ** 2)))


def mae(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.mean(np.abs(gt - pred)))


@dataclass(frozen=True)
class MetricsReport:
    model: str
    window_size: int
    window_seconds: float
    rmse: float
    mae: float
    latency_ms: float
    param_count: int
    dataset: str = "test"

    def __post_init__(self):
        # rmse >= mae holds exactly in real arithmetic; allow rounding at the last place
        if not self.rmse >= self.mae * (1 - 1e-12) or self.mae < 0:
            raise MetricsError(f"inconsistent metrics: rmse={self.rmse} mae={self.mae}")
        if not self.latency_ms > 0:
            raise MetricsError(f"latency must be positive, got {self.latency_ms}")

    def to_row(self) -> dict:
        return {
            "model": self.model,
            "window_samples": self.window_size,
            "window_seconds": self.window_seconds,
            "rmse_mps": self.rmse,
            "mae_mps": self.mae,
            "latency_ms": self.latency_ms,
            "param_count": self.param_count,
        }


def measure_latency(
    model: Model,
    window: np.ndarray,
    reps: int = 50,
    warmup: int = 5,
    clock: Callable[[], float] = time.perf_counter,
) -> float:
    """Median wall time (ms) of ``reps`` single-window predictions after ``warmup`` discarded runs.

    BLAS and OpenMP pools are limited to one thread for the whole measurement.
    """
    if reps < 10:
        raise MetricsError(f"latency needs at least 10 repetitions, got {reps}")
    batch = np.asarray(window)[None, ...]
    timings = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            predict(model, batch)
        for _ in range(reps):
            started = clock()
            predict(model, batch)
            timings.append((clock() - started) * 1000.0)
    return statistics.median(timings)


def evaluate_model(
    model: Model, dataset: WindowedDataset, tag: str = "test", latency_reps: int = 50
) -> Tuple[MetricsReport, np.ndarray]:
    """Metrics of ``model`` on ``dataset`` plus the per-window predictions (infer mode, clamped)."""
    if dataset.window_size != model.window_size:
        raise ModelConfigError(f"{model.name} expects {model.window_size}-sample windows, dataset has {dataset.window_size}")
    pred = predict(model, dataset.windows).astype(np.float64)
    error_rms, error_abs = rmse(dataset.labels, pred), mae(dataset.labels, pred)
    latency = measure_latency(model, dataset.windows[0], latency_reps)
    report = MetricsReport(
        model.name,
        model.window_size,
        model.window_size / SAMPLE_RATE_HZ,
        error_rms,
        error_abs,
        latency,
        param_count(model),
        tag,
    )
    logger.info(
        "{} w={} on {}: rmse {:.4f} m/s, mae {:.4f} m/s, latency {:.2f} ms",
        model.name, model.window_size, tag, report.rmse, report.mae, report.latency_ms,
    )
    return report, pred


def emit_trace(
    model: Model, dataset: WindowedDataset, out: Optional[Union[str, Path]] = None
) -> pd.DataFrame:
    """``t,gt_speed,pred_speed`` per labeled window, written to ``out`` when given."""
    if dataset.window_size != model.window_size:
        raise ModelConfigError(f"{model.name} expects {model.window_size}-sample windows, dataset has {dataset.window_size}")
    pred = predict(model, dataset.windows).astype(np.float64) if len(dataset) else np.zeros(0)
    trace = pd.DataFrame({"t": dataset.t_label, "gt_speed": dataset.labels, "pred_speed": pred}, columns=TRACE_COLUMNS)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        trace.to_csv(out, index=False, lineterminator="\n")
    return trace


def speed_band_report(gt, pred) -> pd.DataFrame:
    """RMSE / MAE per speed band of the ground truth; empty bands report NaN."""
    gt, pred = _pair(gt, pred)
    masks = {
        "stationary": gt < STATIONARY_MPS,
        "urban": (gt >= STATIONARY_MPS) & (gt <= URBAN_MAX_MPS),
        "highway": gt > URBAN_MAX_MPS,
    }
    rows = []
    for band in BANDS:
        mask = masks[band]
        count = int(mask.sum())
        rows.append(
            {
                "band": band,
                "count": count,
                "rmse_mps": rmse(gt[mask], pred[mask]) if count else math.nan,
                "mae_mps": mae(gt[mask], pred[mask]) if count else math.nan,
            }
        )
    return pd.DataFrame(rows, columns=["band", "count", "rmse_mps", "mae_mps"])


def stationary_mean(trace: pd.DataFrame, threshold: float = STATIONARY_MPS) -> float:
    """Mean predicted speed over labels slower than ``threshold``; NaN when there are none."""
    still = trace["gt_speed"] < threshold
    return float(trace.loc[still, "pred_speed"].mean()) if still.any() else math.nan


@dataclass(frozen=True)
class OverspeedEvent:
    start: float
    end: float
    peak_mps: float

    @property
    def duration(self) -> float:
        return self.end - self.start


def detect_overspeed(trace: pd.DataFrame, limit_mps: float, min_duration_s: float = 3.0) -> List[OverspeedEvent]:
    """Runs of consecutive trace rows predicting above ``limit_mps`` for at least ``min_duration_s``."""
    if limit_mps <= 0:
        raise MetricsError(f"speed limit must be positive, got {limit_mps}")
    t = trace["t"].to_numpy(dtype=np.float64)
    pred = trace["pred_speed"].to_numpy(dtype=np.float64)
    if len(t) == 0:
        return []
    spacing = float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    events = []
    start = None
    for i in range(len(t) + 1):
        over = i < len(t) and pred[i] > limit_mps
        contiguous = start is not None and i < len(t) and t[i] - t[i - 1] <= 1.5 * spacing
        if start is not None and not (over and contiguous):
            if t[i - 1] - t[start] >= min_duration_s:
                events.append(OverspeedEvent(float(t[start]), float(t[i - 1]), float(pred[start:i].max())))
            start = None
        if over and start is None:
            start = i
    return events


def _write(frame: pd.DataFrame, out: Optional[Union[str, Path]]):
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False, lineterminator="\n")


def sweep_windows(
    cfg: RunConfig,
    sizes: Optional[Sequence[int]] = None,
    model_name: Optional[str] = None,
    out: Optional[Union[str, Path]] = None,
    trace_dir: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """Independent window / train / evaluate cycle per window size; one row per size."""
    sizes = list(sizes or cfg.sizes)
    name = model_name or cfg.model
    rows = []
    for w in tqdm(sizes, desc=f"sweep {name}"):
        try:
            run = train_from_config(cfg, name, w)
            report, _ = evaluate_model(run.model, run.test, latency_reps=cfg.latency_reps)
            if trace_dir is not None:
                emit_trace(run.model, run.test, Path(trace_dir) / f"trace_{name}_w{w}.csv")
        except (CarSpeedError, ArithmeticError) as e:
            raise SweepError(w, e) from e
        rows.append(report.to_row())
    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    _write(frame, out)
    return frame


def compare_models(
    cfg: RunConfig,
    names: Optional[Sequence[str]] = None,
    window_size: int = COMPARE_WINDOW,
    out: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """Train and evaluate each architecture on one shared split at ``window_size``."""
    names = list(names or cfg.models)
    unknown = [n for n in names if n not in MODEL_NAMES]
    if unknown:
        raise ModelConfigError(f"unknown models {unknown}; choose from {', '.join(MODEL_NAMES)}")
    splits = prepare_splits(cfg, window_size)
    rows = []
    for name in tqdm(names, desc=f"compare w={window_size}"):
        run = train_from_config(cfg, name, window_size, splits=splits)
        report, _ = evaluate_model(run.model, run.test, latency_reps=cfg.latency_reps)
        row = report.to_row()
        row["target_param_count"] = TARGET_PARAM_COUNTS[name]
        rows.append(row)
        logger.info("{}: {} params (target {})", name, row["param_count"], row["target_param_count"])
    frame = pd.DataFrame(rows, columns=COMPARE_COLUMNS)
    _write(frame, out)
    return frame
