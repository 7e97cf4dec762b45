"""
Deterministic drive simulator.

Generates speed / yaw-rate profiles, renders them into phone-frame specific force at 500 Hz
and noisy 1 Hz GPS speed with a GDOP warm-up, and writes session file pairs in the same CSV
format the pipeline reads.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from carspeed.config import settings
from carspeed.data_utils import GPS_COLUMNS, GPS_SUFFIX, IMU_COLUMNS, IMU_SUFFIX, GpsTrack, ImuSession
from carspeed.errors import SimulationError

GRAVITY = 9.80665
IMU_RATE_HZ = 500.0
MAX_ACCEL = 4.0
MAX_SPEED = 40.0
MAX_YAW_RATE = 0.5
MAX_LATERAL = 3.0
BRAKE_ACCEL = 2.0
FINAL_STOP_S = 5.0
MIN_DURATION_S = 60.0

URBAN_SPEEDS = (5.0, 15.0)
HIGHWAY_SPEEDS = (20.0, 33.0)
SEGMENT_KINDS = ("stop", "ramp", "cruise", "turn")


@dataclass(frozen=True)
class Segment:
    kind: str
    start: float
    duration: float
    v_start: float
    v_end: float
    yaw_peak: float = 0.0
    shape: str = "cosine"

    @property
    def end(self) -> float:
        return self.start + self.duration


def ramp_duration(v_start: float, v_end: float, peak_accel: float) -> float:
    """Length of a cosine ramp whose peak acceleration is ``peak_accel``."""
    return abs(v_end - v_start) * math.pi / (2 * peak_accel)


@dataclass
class DriveProfile:
    """Piecewise-smooth speed s(t) >= 0 and yaw rate over [0, duration)"""

    duration: float
    segments: List[Segment] = field(default_factory=list)

    @classmethod
    def compose(cls, steps: Sequence[Tuple], linear_ramps: bool = False) -> "DriveProfile":
        """Build from ``(kind, duration[, value])`` steps.

        ``value`` is the end speed for a ramp and the peak yaw rate for a turn.
        """
        segments, t, v = [], 0.0, 0.0
        for step in steps:
            kind, duration = step[0], float(step[1])
            if kind not in SEGMENT_KINDS:
                raise SimulationError(f"unknown segment kind '{kind}'")
            if duration <= 0:
                raise SimulationError(f"segment duration must be positive, got {duration}")
            v_end, yaw = v, 0.0
            if kind == "stop":
                v = v_end = 0.0
            elif kind == "ramp":
                v_end = float(step[2])
            elif kind == "turn":
                yaw = float(step[2])
            shape = "linear" if linear_ramps else "cosine"
            segments.append(Segment(kind, t, duration, v, v_end, yaw, shape))
            t, v = t + duration, v_end
        return cls(t, segments)

    def sample(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Speed (m/s), longitudinal acceleration (m/s²) and yaw rate (rad/s) at times ``t``."""
        t = np.asarray(t, dtype=np.float64)
        speed, accel, yaw = np.zeros_like(t), np.zeros_like(t), np.zeros_like(t)
        starts = np.array([s.start for s in self.segments])
        index = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(self.segments) - 1)
        for i, seg in enumerate(self.segments):
            mask = index == i
            if not mask.any():
                continue
            tau = np.clip(t[mask] - seg.start, 0.0, seg.duration)
            dv = seg.v_end - seg.v_start
            if seg.kind == "ramp" and seg.shape == "linear":
                speed[mask] = seg.v_start + dv * tau / seg.duration
                accel[mask] = dv / seg.duration
            elif seg.kind == "ramp":
                phase = math.pi * tau / seg.duration
                speed[mask] = seg.v_start + dv * (1 - np.cos(phase)) / 2
                accel[mask] = dv * math.pi / (2 * seg.duration) * np.sin(phase)
            else:
                speed[mask] = seg.v_start
                if seg.kind == "turn":
                    yaw[mask] = seg.yaw_peak * np.sin(math.pi * tau / seg.duration)
        return np.maximum(speed, 0.0), accel, yaw

    def speed(self, t: np.ndarray) -> np.ndarray:
        return self.sample(t)[0]

    def stationary_fraction(self) -> float:
        return sum(s.duration for s in self.segments if s.kind == "stop") / self.duration


def _cruise_speed(rng: np.random.Generator) -> float:
    low, high = HIGHWAY_SPEEDS if rng.random() < 0.35 else URBAN_SPEEDS
    return float(rng.uniform(low, high))


def _turn_yaw(v: float, rng: np.random.Generator) -> float:
    peak = min(MAX_YAW_RATE, MAX_LATERAL / max(v, 1e-6))
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0) * peak)


def gen_profile(duration: float, seed: int) -> DriveProfile:
    """Random stop / ramp / cruise / turn sequence that starts and ends at standstill."""
    if duration < MIN_DURATION_S:
        raise SimulationError(f"profile duration must be >= {MIN_DURATION_S:.0f} s, got {duration}")
    rng = np.random.default_rng(seed)
    segments: List[Segment] = []
    t, v = 0.0, 0.0

    def add(kind, length, v_end, yaw=0.0):
        nonlocal t, v
        segments.append(Segment(kind, t, length, v, v_end, yaw))
        t, v = t + length, v_end

    add("stop", float(rng.uniform(5.0, min(30.0, duration / 4))), 0.0)
    for _attempt in range(1000):
        if v == 0.0:
            if rng.random() < 0.2:
                proposal = ("stop", float(rng.uniform(5.0, 30.0)), 0.0, 0.0)
            else:
                target = _cruise_speed(rng)
                proposal = ("ramp", ramp_duration(0.0, target, rng.uniform(1.0, 3.0)), target, 0.0)
        else:
            choice = rng.random()
            if choice < 0.4:
                proposal = ("cruise", float(rng.uniform(5.0, 40.0)), v, 0.0)
            elif choice < 0.6:
                proposal = ("turn", float(rng.uniform(4.0, 10.0)), v, _turn_yaw(v, rng))
            elif choice < 0.85:
                target = _cruise_speed(rng)
                proposal = ("ramp", ramp_duration(v, target, rng.uniform(1.0, 3.0)), target, 0.0)
            else:
                proposal = ("ramp", ramp_duration(v, 0.0, rng.uniform(1.0, 3.0)), 0.0, 0.0)
        kind, length, v_end, yaw = proposal
        if length <= 0:
            continue
        # room must remain to brake to a halt and hold the final stop
        if t + length + ramp_duration(v_end, 0.0, BRAKE_ACCEL) + FINAL_STOP_S > duration:
            break
        add(kind, length, v_end, yaw)

    if v > 0:
        add("ramp", ramp_duration(v, 0.0, BRAKE_ACCEL), 0.0)
    add("stop", duration - t, 0.0)
    return DriveProfile(duration, segments)


@dataclass
class MountModel:
    """Phone orientation in the vehicle plus accelerometer error model"""

    rotation: np.ndarray
    bias: np.ndarray
    noise_std: float = 0.05
    gravity: float = GRAVITY

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9):
            raise SimulationError("mount rotation must be orthonormal")
        if self.noise_std < 0:
            raise SimulationError(f"noise_std must be >= 0, got {self.noise_std}")

    @classmethod
    def identity(cls, noise_std: float = 0.0) -> "MountModel":
        return cls(np.eye(3), np.zeros(3), noise_std)

    @classmethod
    def random(cls, rng: np.random.Generator, noise_std: float = 0.05, max_bias: float = 0.1, max_tilt: float = 0.5):
        """Any heading in the horizontal plane, pitch and roll within ``max_tilt`` rad."""
        angles = [rng.uniform(-math.pi, math.pi), rng.uniform(-max_tilt, max_tilt), rng.uniform(-max_tilt, max_tilt)]
        rotation = Rotation.from_euler("zyx", angles).as_matrix()
        return cls(rotation, rng.uniform(-max_bias, max_bias, size=3), noise_std)


def render_imu(
    profile: DriveProfile,
    mount: MountModel,
    seed: int,
    rate: float = IMU_RATE_HZ,
    vibration_gain: float = 0.02,
    session_id: str = "drive",
) -> ImuSession:
    """Vehicle-frame specific force (ds/dt, s·ψ̇, g + vibration) rotated into the phone frame.

    Road vibration acts on the vertical axis with a standard deviation of
    ``vibration_gain`` (m/s² per m/s) times speed.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(profile.duration * rate))) / rate
    speed, accel, yaw = profile.sample(t)
    vibration = vibration_gain * speed * rng.standard_normal(len(t))
    f_vehicle = np.stack([accel, speed * yaw, mount.gravity + vibration], axis=1)
    noise = mount.noise_std * rng.standard_normal(f_vehicle.shape) if mount.noise_std > 0 else 0.0
    f_phone = f_vehicle @ mount.rotation.T + mount.bias + noise
    return ImuSession(session_id, t, f_phone, rate)


@dataclass
class GdopProfile:
    """High GDOP while the receiver warms up, then a settled band"""

    warmup_s: float = 10.0
    warmup_level: float = 8.0
    settled_range: Tuple[float, float] = (0.9, 1.7)

    def values(self, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        warm = self.warmup_level + rng.uniform(0.0, 1.0, size=len(t))
        settled = rng.uniform(*self.settled_range, size=len(t))
        return np.where(t < self.warmup_s, warm, settled)


def render_gps(
    profile: DriveProfile,
    noise_std: float = 0.2,
    gdop_profile: Optional[GdopProfile] = None,
    seed: int = 0,
    session_id: str = "drive",
) -> GpsTrack:
    """Speed labels at whole seconds inside the profile, noisy and clamped at 0."""
    rng = np.random.default_rng(seed)
    gdop_profile = gdop_profile or GdopProfile()
    t = np.arange(int(math.ceil(profile.duration)), dtype=np.float64)
    speed = profile.speed(t)
    if noise_std > 0:
        speed = np.maximum(speed + noise_std * rng.standard_normal(len(t)), 0.0)
    return GpsTrack(session_id, t, speed, gdop_profile.values(t, rng))


def emit_session(
    profile: DriveProfile,
    mount: MountModel,
    out_dir: Union[str, Path],
    seed: int,
    session_id: Optional[str] = None,
    gps_noise_std: float = 0.2,
) -> Tuple[Path, Path]:
    """Write ``<id>.imu.csv`` and ``<id>.gps.csv``; identical seeds give identical bytes."""
    session_id = session_id or f"drive_{seed}"
    imu_seed, gps_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    imu = render_imu(profile, mount, imu_seed, session_id=session_id)
    gps = render_gps(profile, gps_noise_std, seed=gps_seed, session_id=session_id)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imu_path, gps_path = out_dir / f"{session_id}{IMU_SUFFIX}", out_dir / f"{session_id}{GPS_SUFFIX}"
    imu_frame = pd.DataFrame(np.column_stack([imu.t, imu.accel]), columns=IMU_COLUMNS)
    gps_frame = pd.DataFrame(np.column_stack([gps.t, gps.speed, gps.gdop]), columns=GPS_COLUMNS)
    imu_frame.to_csv(imu_path, index=False, float_format="%.6f", lineterminator="\n")
    gps_frame.to_csv(gps_path, index=False, float_format="%.6f", lineterminator="\n")
    return imu_path, gps_path


@dataclass
class CorpusSummary:
    session_ids: List[str]
    total_seconds: float
    stationary_fraction: float

    @property
    def hours(self) -> float:
        return self.total_seconds / 3600.0


def synth_corpus(
    hours: float,
    seed: int,
    out_dir: Union[str, Path],
    session_range_s: Tuple[float, float] = (300.0, 900.0),
    imu_noise_std: float = 0.05,
) -> CorpusSummary:
    """Enough sessions of 5–15 minutes to cover ``hours`` of driving, written in parallel."""
    if hours <= 0:
        raise SimulationError(f"hours must be positive, got {hours}")
    low, high = session_range_s
    if not MIN_DURATION_S <= low <= high:
        raise SimulationError(f"session lengths must satisfy {MIN_DURATION_S:.0f} <= low <= high")

    rng = np.random.default_rng(seed)
    plan = []
    remaining = hours * 3600.0
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(10_000)):
        if remaining <= 0:
            break
        duration = float(np.floor(min(rng.uniform(low, high), max(remaining, MIN_DURATION_S))))
        plan.append((f"drive_{index:03d}", int(child.generate_state(1)[0]), duration))
        remaining -= duration

    def write(item):
        session_id, session_seed, duration = item
        profile = gen_profile(duration, session_seed)
        mount = MountModel.random(np.random.default_rng([session_seed, 1]), noise_std=imu_noise_std)
        emit_session(profile, mount, out_dir, session_seed, session_id=session_id)
        return profile

    with ThreadPoolExecutor(max_workers=settings.MAX_WORKERS) as pool:
        profiles = list(tqdm(pool.map(write, plan), total=len(plan), desc="synth"))

    total = sum(p.duration for p in profiles)
    stationary = sum(p.stationary_fraction() * p.duration for p in profiles) / total
    summary = CorpusSummary([sid for sid, _, _ in plan], total, stationary)
    logger.info(
        "Wrote {} sessions ({:.2f} h, {:.1%} stationary) to {}",
        len(plan), summary.hours, summary.stationary_fraction, out_dir,
    )
    return summary
