"""
Tests for the loss, optimizer, schedule and training loop
"""

import math

import numpy as np
import pandas as pd
import pytest

from carspeed.autograd import Precision, Tape, Tensor
from carspeed.config import RunConfig, TrainConfig
from carspeed.errors import DimensionError, ModelConfigError, NonFiniteGradientError, TrainingError
from carspeed.losses import mse_loss, mse_value
from carspeed.models import build_model
from carspeed.train import (
    HISTORY_COLUMNS,
    AdamState,
    adam_step,
    clip_by_global_norm,
    fit,
    lr_at,
    train_from_config,
)


class TestLoss:
    """Half mean squared error"""

    def test_single_sample(self):
        """gt 2, pred 0 gives 2.0"""
        assert mse_loss(Tensor([0.0]), Tensor([2.0])).item() == 2.0
        assert mse_value(np.array([0.0]), np.array([2.0])) == 2.0

    def test_gradient(self):
        """d/dpred = (pred - gt) / N"""
        tape = Tape()
        pred = tape.watch(Tensor([1.0, 3.0]))
        tape.backward(mse_loss(pred, Tensor([0.0, 0.0])))
        assert pred.grad.tolist() == [0.5, 1.5]

    def test_shape_mismatch(self):
        """Predictions and targets must be equal-length vectors"""
        with pytest.raises(DimensionError):
            mse_loss(Tensor([1.0, 2.0]), Tensor([1.0]))
        with pytest.raises(DimensionError):
            mse_value(np.zeros(0), np.zeros(0))


class TestSchedule:
    """Continuous exponential learning-rate decay"""

    def test_values(self):
        """1e-3 at step 0, 2e-4 after one horizon, the geometric mean halfway"""
        cfg = TrainConfig()
        assert lr_at(0, cfg) == pytest.approx(1e-3)
        assert lr_at(30_000, cfg) == pytest.approx(2e-4)
        assert lr_at(15_000, cfg) == pytest.approx(4.4721e-4, rel=1e-4)

    def test_monotone(self):
        """The rate never increases"""
        cfg = TrainConfig()
        rates = [lr_at(s, cfg) for s in range(0, 100_000, 997)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    def test_negative_step(self):
        """Steps start at zero"""
        with pytest.raises(TrainingError):
            lr_at(-1, TrainConfig())


class TestAdam:
    """Optimizer update and gradient clipping"""

    def test_first_step_moves_by_lr(self):
        """The bias-corrected first step has magnitude lr against the gradient"""
        params = {"w": Tensor(np.array([1.0, -1.0]))}
        state = AdamState.zeros(params)
        updated = adam_step(params, {"w": np.array([0.5, -2.0])}, state, 0.1, TrainConfig())
        assert np.allclose(updated["w"].data, [0.9, -0.9])
        assert state.t == 1

    def test_zero_gradient_still_counts_a_step(self):
        """A zero gradient leaves parameters unchanged and advances t"""
        params = {"w": Tensor(np.array([0.3, -1.2]))}
        state = AdamState.zeros(params)
        updated = adam_step(params, {"w": np.zeros(2)}, state, 0.1, TrainConfig())
        assert np.array_equal(updated["w"].data, params["w"].data)
        assert state.t == 1

    def test_two_steps_match_scalar_rule(self):
        """Two updates with a constant gradient agree with a scalar re-implementation"""
        cfg = TrainConfig()
        theta0, g, lr = np.array([0.7, -0.4, 2.5]), np.array([0.25, -1.5, 3.0]), 0.01
        params = {"w": Tensor(theta0.copy())}
        state = AdamState.zeros(params)
        for _ in range(2):
            params = adam_step(params, {"w": g}, state, lr, cfg)

        for i in range(3):
            theta, m, v = theta0[i], 0.0, 0.0
            for t in (1, 2):
                m = cfg.beta1 * m + (1 - cfg.beta1) * g[i]
                v = cfg.beta2 * v + (1 - cfg.beta2) * g[i] * g[i]
                m_hat = m / (1 - cfg.beta1 ** t)
                v_hat = v / (1 - cfg.beta2 ** t)
                theta -= lr * m_hat / (math.sqrt(v_hat) + cfg.epsilon)
            assert abs(params["w"].data[i] - theta) < 1e-12
        assert state.t == 2

    def test_keeps_dtype(self):
        """Narrow parameters stay narrow"""
        params = {"w": Tensor(np.ones(3, dtype=np.float32))}
        updated = adam_step(params, {"w": np.ones(3, dtype=np.float32)}, AdamState.zeros(params), 0.1, TrainConfig())
        assert updated["w"].dtype == np.float32

    def test_non_finite_gradient_updates_nothing(self):
        """A NaN gradient aborts the whole step before any state changes"""
        params = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
        state = AdamState.zeros(params)
        with pytest.raises(NonFiniteGradientError) as info:
            adam_step(params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, 0.1, TrainConfig())
        assert info.value.param == "b"
        assert state.t == 0
        assert not np.any(state.m["a"])

    def test_gradient_shape(self):
        """Gradients must match their parameters"""
        params = {"a": Tensor(np.ones(2))}
        with pytest.raises(DimensionError):
            adam_step(params, {"a": np.ones(3)}, AdamState.zeros(params), 0.1, TrainConfig())

    def test_clip_by_global_norm(self):
        """Gradients above the limit are rescaled together"""
        grads, norm = clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        assert norm == 5.0
        assert grads["a"][0] == pytest.approx(0.6)
        assert grads["b"][0] == pytest.approx(0.8)

    def test_clip_leaves_small_gradients(self):
        """Gradients under the limit pass through"""
        raw = {"a": np.array([0.3])}
        grads, _ = clip_by_global_norm(raw, 1.0)
        assert grads is raw


class TestFit:
    """Training loop"""

    def test_loss_decreases_and_best_is_restored(self, dataset_factory):
        """Training reduces loss and leaves the best-validation weights in place"""
        model = build_model("dnn_star", 6, seed=0, precision=Precision.WIDE)
        cfg = TrainConfig(batch_size=16, max_epochs=6, initial_lr=0.01, seed=1)
        train_set = dataset_factory(96, 6, seed=0)
        val_set = dataset_factory(32, 6, seed=1)
        history = fit(model, train_set, val_set, cfg)
        assert history.stop_reason == "max_epochs"
        assert history.epochs == list(range(1, 7))
        assert history.steps == 6 * 6
        assert history.train_loss[-1] < history.train_loss[0]
        assert model.norm_stats is not None

        from carspeed.data_utils import standardize
        from carspeed.train import validation_loss

        x_val = standardize("apply", val_set.windows, model.norm_stats)
        assert validation_loss(model, x_val, val_set.labels) == pytest.approx(history.best_val_loss)

    def test_early_stopping(self, dataset_factory):
        """Training halts once validation stops improving for `patience` epochs"""
        model = build_model("dnn_star", 6, seed=0, precision=Precision.WIDE)
        cfg = TrainConfig(batch_size=16, max_epochs=50, initial_lr=1e-12, early_stop_patience=1, min_delta=1e-3)
        history = fit(model, dataset_factory(32, 6), dataset_factory(16, 6, seed=1), cfg)
        assert history.stop_reason == "early_stopping"
        assert len(history.epochs) == 2
        assert history.best_epoch == int(np.argmin(history.val_loss)) + 1

    def test_small_improvements_are_kept(self, dataset_factory):
        """Gains below min_delta still update the returned weights but not the patience clock"""
        from carspeed.data_utils import standardize
        from carspeed.train import validation_loss

        model = build_model("dnn_star", 6, seed=0, precision=Precision.WIDE)
        cfg = TrainConfig(batch_size=16, max_epochs=20, initial_lr=0.01, early_stop_patience=3, min_delta=1e6, seed=2)
        val_set = dataset_factory(32, 6, seed=1)
        history = fit(model, dataset_factory(96, 6), val_set, cfg)
        assert history.stop_reason == "early_stopping"
        assert len(history.epochs) == 4
        assert history.best_epoch == int(np.argmin(history.val_loss)) + 1
        x_val = standardize("apply", val_set.windows, model.norm_stats)
        assert validation_loss(model, x_val, val_set.labels) == history.best_val_loss

    def test_reproducible(self, dataset_factory):
        """Same seeds give the same history and weights"""
        cfg = TrainConfig(batch_size=8, max_epochs=2, initial_lr=0.01, seed=4)
        runs = []
        for _ in range(2):
            model = build_model("lstm", 6, seed=3, precision=Precision.WIDE)
            history = fit(model, dataset_factory(24, 6), dataset_factory(8, 6, seed=1), cfg)
            runs.append((model, history))
        (m1, h1), (m2, h2) = runs
        assert h1.train_loss == h2.train_loss
        assert h1.val_loss == h2.val_loss
        for key, tensor in m1.named_parameters().items():
            assert np.array_equal(tensor.data, m2.named_parameters()[key].data)

    def test_last_partial_batch_is_used(self, dataset_factory):
        """Ten windows in batches of four take three steps per epoch"""
        model = build_model("dnn_star", 6, precision=Precision.WIDE)
        history = fit(model, dataset_factory(10, 6), dataset_factory(4, 6, seed=1), TrainConfig(batch_size=4, max_epochs=1))
        assert history.steps == 3

    def test_empty_split(self, dataset_factory):
        """Empty training or validation sets are refused"""
        from carspeed.data_utils import WindowedDataset

        model = build_model("dnn_star", 6)
        with pytest.raises(TrainingError):
            fit(model, WindowedDataset.empty(6), dataset_factory(4, 6), TrainConfig(max_epochs=1))

    def test_window_mismatch(self, dataset_factory):
        """The dataset window must match the model"""
        model = build_model("dnn_star", 6)
        with pytest.raises(ModelConfigError):
            fit(model, dataset_factory(8, 7), dataset_factory(4, 7), TrainConfig(max_epochs=1))

    def test_history_csv(self, dataset_factory, tmp_path):
        """History exports one row per epoch"""
        model = build_model("dnn_star", 6, precision=Precision.WIDE)
        history = fit(model, dataset_factory(8, 6), dataset_factory(4, 6, seed=1), TrainConfig(max_epochs=2))
        history.to_csv(tmp_path / "h.csv")
        frame = pd.read_csv(tmp_path / "h.csv")
        assert list(frame.columns) == HISTORY_COLUMNS
        assert len(frame) == 2
        assert all(math.isfinite(v) for v in frame["val_loss"])

    @pytest.mark.slow
    def test_train_from_sessions(self, session_dir):
        """Sessions on disk go through windowing, splitting and fitting"""
        cfg = RunConfig(
            data_dir=str(session_dir),
            model="dnn_star",
            window_size=10,
            precision="wide",
            train=TrainConfig(batch_size=32, max_epochs=2),
        )
        run = train_from_config(cfg)
        assert run.model.name == "dnn_star"
        assert len(run.history.epochs) == 2
        assert len(set(run.test.session_ids)) == 1
        assert len(run.train) > len(run.val) > 0

    @pytest.mark.slow
    def test_carspeednet_overfits_small_set(self, dataset_factory):
        """CarSpeedNet at w=20 drives the loss on 64 windows below 0.05 within 2,000 epochs"""
        data = dataset_factory(64, 20, seed=5)
        model = build_model("carspeednet", 20, seed=0)
        cfg = TrainConfig(batch_size=16, max_epochs=2000, early_stop_patience=2000, log_interval=200, seed=0)
        history = fit(model, data, data, cfg)
        assert min(history.train_loss) < 0.05
