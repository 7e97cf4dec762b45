"""Session files -> gated, filtered, decimated 20 Hz streams -> labeled windows"""

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from carspeed.config import RunConfig, settings
from carspeed.errors import (
    DataFormatError,
    GdopRejectedError,
    MonotonicityError,
    NormalizationError,
    SplitError,
)
from carspeed.signal_processing import decimate, gate_gdop, grid_phase, lowpass, snap_to_grid, split_on_gaps

IMU_COLUMNS = ["t", "ax", "ay", "az"]
GPS_COLUMNS = ["t", "speed", "gdop"]
IMU_SUFFIX = ".imu.csv"
GPS_SUFFIX = ".gps.csv"

PathLike = Union[str, Path]


def _check_increasing(t: np.ndarray, what: str, path: Optional[str] = None):
    bad = np.flatnonzero(np.diff(t) <= 0)
    if len(bad):
        row = int(bad[0]) + 1
        # data row i sits on file line i + 2 (header is line 1)
        raise MonotonicityError(
            f"{what} timestamps must be strictly increasing; t={t[row]:.6f} follows t={t[row - 1]:.6f}",
            path=path,
            line=row + 2,
        )


@dataclass
class ImuSession:
    session_id: str
    t: np.ndarray
    accel: np.ndarray
    nominal_rate: float = 500.0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.accel = np.asarray(self.accel, dtype=np.float64).reshape(-1, 3)
        if len(self.t) != len(self.accel):
            raise DataFormatError(f"{self.session_id}: {len(self.t)} timestamps for {len(self.accel)} samples")
        if self.nominal_rate <= 0:
            raise DataFormatError(f"{self.session_id}: nominal rate must be positive")
        _check_increasing(self.t, "IMU")

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class GpsTrack:
    session_id: str
    t: np.ndarray
    speed: np.ndarray
    gdop: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.speed = np.asarray(self.speed, dtype=np.float64)
        self.gdop = np.asarray(self.gdop, dtype=np.float64)
        if not len(self.t) == len(self.speed) == len(self.gdop):
            raise DataFormatError(f"{self.session_id}: GPS columns differ in length")
        _check_increasing(self.t, "GPS")
        if np.any(self.speed < 0):
            raise DataFormatError(f"{self.session_id}: negative GPS speed")
        if np.any(self.gdop <= 0):
            raise DataFormatError(f"{self.session_id}: gdop must be positive")

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class AccelStream:
    """Uniformly sampled, filtered specific force of one contiguous run"""

    session_id: str
    t: np.ndarray
    accel: np.ndarray
    rate: float


# CSV ingestion

def _parser_error_line(error: Exception) -> Optional[int]:
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) if match else None


def _read_numeric_csv(path: PathLike, columns: List[str]) -> np.ndarray:
    path = str(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError as e:
        raise DataFormatError("empty file", path=path) from e
    except pd.errors.ParserError as e:
        raise DataFormatError(f"malformed row: {e}", path=path, line=_parser_error_line(e)) from e

    if list(frame.columns) != columns:
        raise DataFormatError(f"expected header {','.join(columns)}, got {','.join(map(str, frame.columns))}", path, 1)
    if frame.empty:
        raise DataFormatError("no data rows", path=path)

    values = frame.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    array = values.to_numpy(dtype=np.float64)
    bad = ~np.isfinite(array).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raw = ",".join(map(str, frame.iloc[row].tolist()))
        raise DataFormatError(f"malformed row '{raw}'", path=path, line=row + 2)
    return array


def _session_id_from(path: PathLike, suffix: str) -> str:
    name = Path(path).name
    return name[: -len(suffix)] if name.endswith(suffix) else Path(path).stem


def parse_imu_csv(path: PathLike, nominal_rate: float = 500.0) -> ImuSession:
    array = _read_numeric_csv(path, IMU_COLUMNS)
    _check_increasing(array[:, 0], "IMU", str(path))
    return ImuSession(_session_id_from(path, IMU_SUFFIX), array[:, 0], array[:, 1:4], nominal_rate)


def parse_gps_csv(path: PathLike) -> GpsTrack:
    array = _read_numeric_csv(path, GPS_COLUMNS)
    _check_increasing(array[:, 0], "GPS", str(path))
    negative = np.flatnonzero(array[:, 1] < 0)
    if len(negative):
        raise DataFormatError("speed must be >= 0", path=str(path), line=int(negative[0]) + 2)
    nonpositive = np.flatnonzero(array[:, 2] <= 0)
    if len(nonpositive):
        raise DataFormatError("gdop must be > 0", path=str(path), line=int(nonpositive[0]) + 2)
    return GpsTrack(_session_id_from(path, GPS_SUFFIX), array[:, 0], array[:, 1], array[:, 2])


def session_paths(data_dir: PathLike, session_id: str) -> Tuple[Path, Path]:
    root = Path(data_dir)
    return root / f"{session_id}{IMU_SUFFIX}", root / f"{session_id}{GPS_SUFFIX}"


def list_sessions(data_dir: PathLike) -> List[str]:
    """Session ids with both an IMU and a GPS file, sorted."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataFormatError("session directory does not exist", path=str(root))
    ids = [_session_id_from(p, IMU_SUFFIX) for p in root.glob(f"*{IMU_SUFFIX}")]
    paired = sorted(i for i in ids if (root / f"{i}{GPS_SUFFIX}").exists())
    missing = sorted(set(ids) - set(paired))
    if missing:
        logger.warning("Sessions without a GPS file are ignored: {}", ", ".join(missing))
    return paired


def load_session(data_dir: PathLike, session_id: str, nominal_rate: float = 500.0) -> Tuple[ImuSession, GpsTrack]:
    imu_path, gps_path = session_paths(data_dir, session_id)
    return parse_imu_csv(imu_path, nominal_rate), parse_gps_csv(gps_path)


# Preprocessing

def preprocess_session(imu: ImuSession, track: GpsTrack, cfg: RunConfig) -> Tuple[List[AccelStream], GpsTrack]:
    """GDOP gate, split on gaps, snap to the nominal grid, low-pass and decimate each run."""
    track, imu = gate_gdop(track, imu, cfg.gdop_max)
    factor = cfg.decimation_factor
    rate = imu.nominal_rate / factor
    streams = []
    for run in split_on_gaps(imu.t, cfg.max_gap_s):
        grid_t, accel = snap_to_grid(imu.t[run], imu.accel[run], imu.nominal_rate)
        # decimated samples sit on multiples of 1/rate so they meet the 1 Hz labels
        phase = grid_phase(grid_t[0], imu.nominal_rate, factor)
        if len(grid_t) <= phase:
            continue
        filtered = lowpass(accel, imu.nominal_rate, cfg.cutoff_hz)
        streams.append(
            AccelStream(imu.session_id, decimate(grid_t, factor, phase), decimate(filtered, factor, phase), rate)
        )
    if len(streams) > 1:
        logger.debug("{}: split into {} runs on sampling gaps", imu.session_id, len(streams))
    return streams, track


# Windowing

@dataclass
class WindowedDataset:
    window_size: int
    windows: np.ndarray
    labels: np.ndarray
    t_label: np.ndarray
    session_ids: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        n = len(self.labels)
        self.windows = np.asarray(self.windows, dtype=np.float64).reshape(n, self.window_size, 3)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.t_label = np.asarray(self.t_label, dtype=np.float64)
        self.session_ids = np.asarray(self.session_ids, dtype=str)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls, window_size: int) -> "WindowedDataset":
        return cls(window_size, np.zeros((0, window_size, 3)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=str))

    def subset(self, index: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(
            self.window_size, self.windows[index], self.labels[index], self.t_label[index], self.session_ids[index]
        )

    @classmethod
    def concat(cls, parts: Sequence["WindowedDataset"], window_size: Optional[int] = None) -> "WindowedDataset":
        if not parts:
            if window_size is None:
                raise SplitError("cannot concatenate zero datasets without a window size")
            return cls.empty(window_size)
        sizes = {p.window_size for p in parts}
        if len(sizes) != 1:
            raise SplitError(f"datasets have different window sizes {sorted(sizes)}")
        return cls(
            parts[0].window_size,
            np.concatenate([p.windows for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.t_label for p in parts]),
            np.concatenate([p.session_ids for p in parts]),
            sum(p.skipped for p in parts),
        )

    def by_session(self) -> Dict[str, "WindowedDataset"]:
        return {sid: self.subset(np.flatnonzero(self.session_ids == sid)) for sid in sorted(set(self.session_ids))}

    def save_npz(self, path: PathLike):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            window_size=np.array(self.window_size),
            windows=self.windows,
            labels=self.labels,
            t_label=self.t_label,
            session_ids=self.session_ids,
        )

    @classmethod
    def load_npz(cls, path: PathLike) -> "WindowedDataset":
        with np.load(path, allow_pickle=False) as data:
            return cls(
                int(data["window_size"]), data["windows"], data["labels"], data["t_label"], data["session_ids"]
            )


def extract_windows(
    stream: AccelStream, track: GpsTrack, w: int, tolerance: float = 0.025
) -> WindowedDataset:
    """Pair every GPS label with the ``w`` most recent samples ending at its timestamp.

    Labels without ``w`` samples of history, or whose nearest preceding sample is more than
    ``tolerance`` seconds away, are skipped and counted in ``skipped``.
    """
    if w < 5:
        raise SplitError(f"window size must be >= 5, got {w}")
    t = stream.t
    if len(t) == 0:
        return WindowedDataset(w, np.zeros((0, w, 3)), [], [], [], skipped=len(track))

    ends = np.searchsorted(t, track.t + 1e-9, side="right") - 1
    valid = (ends >= w - 1) & (ends < len(t))
    valid &= np.abs(t[np.clip(ends, 0, len(t) - 1)] - track.t) <= tolerance + 1e-9
    picks = np.flatnonzero(valid)
    if len(picks):
        offsets = np.arange(-w + 1, 1)
        windows = stream.accel[ends[picks][:, None] + offsets[None, :]]
    else:
        windows = np.zeros((0, w, 3))
    return WindowedDataset(
        w,
        windows,
        track.speed[picks],
        track.t[picks],
        np.full(len(picks), stream.session_id),
        skipped=len(track) - len(picks),
    )


def windows_for_session(streams: Sequence[AccelStream], track: GpsTrack, w: int, tolerance: float) -> WindowedDataset:
    parts = [extract_windows(s, track, w, tolerance) for s in streams]
    labeled = sum(len(p) for p in parts)
    dataset = WindowedDataset.concat(parts, window_size=w)
    dataset.skipped = len(track) - labeled
    return dataset


def build_session_dataset(
    data_dir: PathLike, session_id: str, cfg: RunConfig, w: int, skip_rejected: bool = True
) -> Optional[WindowedDataset]:
    """Windowed dataset of one session, or None when the GDOP gate rejects it and ``skip_rejected``."""
    imu, track = load_session(data_dir, session_id, cfg.imu_rate_hz)
    try:
        streams, track = preprocess_session(imu, track, cfg)
    except GdopRejectedError as e:
        if not skip_rejected:
            raise
        logger.warning("Skipping session: {}", e)
        return None
    dataset = windows_for_session(streams, track, w, cfg.label_tolerance_s)
    logger.debug("{}: {} windows, {} labels skipped", session_id, len(dataset), dataset.skipped)
    return dataset


def build_datasets(
    data_dir: PathLike, cfg: RunConfig, w: int, session_ids: Optional[Sequence[str]] = None
) -> Dict[str, WindowedDataset]:
    """Per-session datasets keyed and ordered by session id; sessions are processed in parallel."""
    ids = sorted(session_ids) if session_ids is not None else list_sessions(data_dir)
    if not ids:
        raise DataFormatError("no sessions found", path=str(data_dir))
    with ThreadPoolExecutor(max_workers=settings.MAX_WORKERS) as pool:
        results = list(
            tqdm(
                pool.map(lambda sid: build_session_dataset(data_dir, sid, cfg, w), ids),
                total=len(ids),
                desc=f"windows w={w}",
                disable=len(ids) < 2,
            )
        )
    datasets = {sid: ds for sid, ds in zip(ids, results) if ds is not None}
    total = sum(len(ds) for ds in datasets.values())
    skipped = sum(ds.skipped for ds in datasets.values())
    logger.info("Windowed {} sessions at w={}: {} windows, {} labels skipped", len(datasets), w, total, skipped)
    return datasets


def load_datasets(data: PathLike, cfg: RunConfig, w: int) -> Dict[str, WindowedDataset]:
    """Session directory or a cached ``.npz`` written by ``preprocess``."""
    if str(data).endswith(".npz"):
        cached = WindowedDataset.load_npz(data)
        if cached.window_size != w:
            raise SplitError(f"{data} holds windows of {cached.window_size} samples, need {w}")
        return cached.by_session()
    return build_datasets(data, cfg, w)


# Splits

def split_sessions(
    datasets: Dict[str, WindowedDataset],
    n_test_sessions: int = 1,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> Tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Hold out whole sessions for test, then shuffle the remaining windows into train/val."""
    ids = sorted(datasets)
    if len(ids) < 3:
        raise SplitError(f"need at least 3 sessions to split, got {len(ids)}")
    if not 1 <= n_test_sessions <= len(ids) - 1:
        raise SplitError(f"cannot hold out {n_test_sessions} of {len(ids)} sessions")
    if not 0 < val_fraction < 1:
        raise SplitError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    window_size = datasets[ids[0]].window_size

    rng = np.random.default_rng(seed)
    test_ids = sorted(rng.choice(ids, size=n_test_sessions, replace=False).tolist())
    rest_ids = [i for i in ids if i not in test_ids]
    test = WindowedDataset.concat([datasets[i] for i in test_ids], window_size)
    rest = WindowedDataset.concat([datasets[i] for i in rest_ids], window_size)

    order = rng.permutation(len(rest))
    n_val = int(round(val_fraction * len(rest)))
    val, train = rest.subset(np.sort(order[:n_val])), rest.subset(np.sort(order[n_val:]))
    if len(train) == 0 or len(val) == 0:
        raise SplitError(f"{len(rest)} non-test windows cannot fill both train and validation splits")
    logger.info(
        "Split: test sessions {} ({} windows), train {} / val {} windows",
        ", ".join(test_ids), len(test), len(train), len(val),
    )
    return train, val, test


# Standardization

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if np.any(self.std <= 0):
            raise NormalizationError(f"standard deviation must be positive on every axis, got {self.std}")

    def invert(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data) * self.std + self.mean

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "NormStats":
        return cls(np.array(data["mean"]), np.array(data["std"]))


def standardize(
    mode: Literal["fit", "apply"], data: np.ndarray, stats: Optional[NormStats] = None
) -> Union[NormStats, np.ndarray]:
    """``fit`` -> per-axis NormStats over all samples; ``apply`` -> (x - mean) / std."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[-1] != 3:
        raise NormalizationError(f"expected 3 axes on the last dimension, got {data.shape}")
    if mode == "fit":
        flat = data.reshape(-1, 3)
        if len(flat) == 0:
            raise NormalizationError("cannot fit statistics on an empty set")
        std = flat.std(axis=0)
        if np.any(std == 0):
            raise NormalizationError(f"zero variance on axis {int(np.flatnonzero(std == 0)[0])}")
        return NormStats(flat.mean(axis=0), std)
    if mode == "apply":
        if stats is None:
            raise NormalizationError("apply needs statistics fitted on the training windows")
        return (data - stats.mean) / stats.std
    raise NormalizationError(f"unknown mode '{mode}'")
