"""
Array-level signal operations for the accelerometer stream: grid snapping, gap splitting,
zero-phase low-pass filtering, decimation and GDOP gating.
"""

from dataclasses import replace
from typing import TYPE_CHECKING, List, Tuple

import numpy as np
from loguru import logger
from scipy.signal import butter, filtfilt

from carspeed.errors import GdopRejectedError, SignalConfigError

if TYPE_CHECKING:
    from carspeed.data_utils import GpsTrack, ImuSession

FILTER_ORDER = 2


def snap_to_grid(t: np.ndarray, values: np.ndarray, rate: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour resample of irregular samples onto the ``k / rate`` grid they span."""
    if rate <= 0:
        raise SignalConfigError(f"rate must be positive, got {rate}")
    t = np.asarray(t, dtype=np.float64)
    values = np.asarray(values)
    first, last = int(round(t[0] * rate)), int(round(t[-1] * rate))
    grid = np.arange(first, last + 1) / rate
    if len(t) == 1:
        return grid, values.copy()

    right = np.clip(np.searchsorted(t, grid), 1, len(t) - 1)
    left = right - 1
    nearest = np.where(grid - t[left] <= t[right] - grid, left, right)
    return grid, values[nearest]


def split_on_gaps(t: np.ndarray, max_gap: float) -> List[slice]:
    """Contiguous runs of ``t`` whose consecutive spacing never exceeds ``max_gap`` seconds."""
    if len(t) == 0:
        return []
    breaks = np.flatnonzero(np.diff(t) > max_gap) + 1
    edges = [0, *breaks.tolist(), len(t)]
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def lowpass(signal: np.ndarray, fs: float, cutoff: float) -> np.ndarray:
    """Second-order Butterworth low-pass run forward then backward along axis 0.

    Each column is filtered independently; the net phase is zero and DC passes with unit gain.
    """
    if fs <= 0 or not 0 < cutoff < fs / 2:
        raise SignalConfigError(f"cutoff must lie in (0, fs/2) = (0, {fs / 2}), got {cutoff}")
    signal = np.asarray(signal, dtype=np.float64)
    n = signal.shape[0]
    if n < 2:
        return signal.copy()
    b, a = butter(FILTER_ORDER, cutoff, btype="low", fs=fs)
    padlen = min(3 * max(len(a), len(b)), n - 1)
    return filtfilt(b, a, signal, axis=0, padlen=padlen)


def decimate(signal: np.ndarray, factor: int, offset: int = 0) -> np.ndarray:
    """Keep every ``factor``-th sample starting at ``offset`` (index 0 by default); apply ``lowpass`` first."""
    if int(factor) != factor or factor < 1:
        raise SignalConfigError(f"decimation factor must be an integer >= 1, got {factor}")
    if offset < 0:
        raise SignalConfigError(f"decimation offset must be >= 0, got {offset}")
    return np.asarray(signal)[int(offset) :: int(factor)]


def grid_phase(t0: float, rate: float, factor: int) -> int:
    """Samples to skip from ``t0`` so decimation lands on multiples of ``factor / rate`` seconds."""
    return int(-round(t0 * rate)) % int(factor)


def gate_gdop(track: "GpsTrack", imu: "ImuSession", threshold: float) -> Tuple["GpsTrack", "ImuSession"]:
    """Drop everything before the first GPS fix with gdop <= threshold and re-zero time there."""
    if threshold <= 0:
        raise SignalConfigError(f"gdop threshold must be positive, got {threshold}")
    good = np.flatnonzero(track.gdop <= threshold)
    if len(good) == 0:
        raise GdopRejectedError(
            f"session {track.session_id}: no GPS fix reaches gdop <= {threshold} "
            f"(best {float(track.gdop.min()) if len(track.gdop) else float('nan'):.2f})"
        )
    start = good[0]
    t0 = track.t[start]
    keep = imu.t >= t0 - 1e-9
    if start:
        logger.debug("{}: GDOP gate drops the first {:.2f} s", track.session_id, t0 - track.t[0])
    gated_track = replace(
        track,
        t=track.t[start:] - t0,
        speed=track.speed[start:],
        gdop=track.gdop[start:],
    )
    gated_imu = replace(imu, t=imu.t[keep] - t0, accel=imu.accel[keep])
    return gated_track, gated_imu
