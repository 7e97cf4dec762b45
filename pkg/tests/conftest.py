"""
Shared fixtures for carspeed tests
"""

import numpy as np
import pytest

from carspeed.config import RunConfig, TrainConfig
from carspeed.data_utils import WindowedDataset
from carspeed.synthetic import DriveProfile, MountModel, emit_session


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains models on synthetic sessions (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_cfg():
    return RunConfig(precision="wide")


@pytest.fixture
def small_train_cfg():
    return TrainConfig(batch_size=8, max_epochs=3, early_stop_patience=50, seed=3)


def make_dataset(n: int, window_size: int, seed: int = 0, session_id: str = "s0") -> WindowedDataset:
    """Random windows whose label grows with the vertical-axis spread."""
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.0, 2.0, size=n)
    windows = rng.standard_normal((n, window_size, 3)) * 0.2
    windows[:, :, 2] = 9.8 + scale[:, None] * rng.standard_normal((n, window_size))
    labels = 10.0 * scale
    return WindowedDataset(window_size, windows, labels, np.arange(n, dtype=float), np.full(n, session_id))


@pytest.fixture
def dataset_factory():
    return make_dataset


@pytest.fixture
def session_dir(tmp_path):
    """Three short noiseless-mount sessions: stop, accelerate, cruise, brake, stop."""
    plan = [("stop", 12.0), ("ramp", 8.0, 10.0), ("cruise", 20.0), ("ramp", 8.0, 0.0), ("stop", 12.0)]
    for index in range(3):
        profile = DriveProfile.compose(plan)
        emit_session(profile, MountModel.identity(noise_std=0.02), tmp_path, seed=index, session_id=f"drive_{index:03d}")
    return tmp_path
