"""
Tests for the model zoo, prediction and weights files
"""

import json
import struct

import numpy as np
import pytest

from carspeed.autograd import Precision, Tape, Tensor, grad_check, reduce_sum
from carspeed.config import MODEL_NAMES
from carspeed.data_utils import standardize
from carspeed.errors import (
    ChecksumError,
    DimensionError,
    MagicMismatchError,
    ModelConfigError,
    NormalizationError,
    StatisticsError,
    TruncatedWeightsError,
    VersionMismatchError,
    WeightsFileError,
)
from carspeed.losses import mse_loss
from carspeed.models import (
    ARCHITECTURES,
    TARGET_PARAM_COUNTS,
    LayerSpec,
    build_model,
    closed_form_param_count,
    describe,
    infer_widths,
    param_count,
    predict,
)
from carspeed.utils import WEIGHTS_MAGIC, load_weights, save_weights


PREFIX = "<4sBI"


def _header_length(path):
    return struct.unpack_from(PREFIX, path.read_bytes())[2]


def _header(path):
    start = struct.calcsize(PREFIX)
    return json.loads(path.read_bytes()[start:start + _header_length(path)])


def _rewrite_header(path, edit):
    """Apply ``edit`` to the JSON header in place; the payload and checksum are kept."""
    data = path.read_bytes()
    _, version, length = struct.unpack_from(PREFIX, data)
    start = struct.calcsize(PREFIX)
    header = json.loads(data[start:start + length])
    edit(header)
    raw = json.dumps(header).encode("utf-8")
    path.write_bytes(data[:4] + struct.pack("<BI", version, len(raw)) + raw + data[start + length:])


def _warm(model, rng, batch=4):
    """One train-mode pass so batchnorm running statistics exist."""
    x = Tensor(rng.standard_normal((batch, model.window_size, 3)).astype(model.dtype))
    model.forward(x, "train", rng)


def _ready(name, window_size, rng, precision=Precision.NARROW):
    model = build_model(name, window_size, seed=1, precision=precision)
    windows = rng.standard_normal((16, window_size, 3))
    model.norm_stats = standardize("fit", windows)
    _warm(model, rng)
    return model, windows


class TestZoo:
    """Architecture registry and parameter accounting"""

    def test_every_model_is_registered(self):
        """Each selectable name has an architecture and a quoted target"""
        assert set(ARCHITECTURES) == set(MODEL_NAMES) == set(TARGET_PARAM_COUNTS)

    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_initialized_count_matches_closed_form(self, name):
        """Built models hold exactly the closed-form number of trainables"""
        model = build_model(name, 20)
        assert param_count(model) == closed_form_param_count(model.specs)
        assert sum(count for _, count in describe(model)) == param_count(model)

    def test_carspeednet_count(self):
        """The primary model's trainable total"""
        assert param_count(build_model("carspeednet", 80)) == 169_781

    def test_count_is_independent_of_window(self):
        """Window length does not change the parameter count"""
        assert param_count(build_model("carspeednet", 5)) == param_count(build_model("carspeednet", 80))

    def test_wavenet_count(self):
        """The dilated causal stack is the largest model"""
        assert param_count(build_model("wavenet", 20)) == 239_163

    def test_unknown_model(self):
        """Unknown names are rejected"""
        with pytest.raises(ModelConfigError):
            build_model("transformer", 20)

    def test_window_too_short(self):
        """Windows shorter than five samples are rejected"""
        with pytest.raises(ModelConfigError):
            build_model("carspeednet", 4)

    def test_stack_must_end_in_scalar(self):
        """A stack that leaves a sequence or a vector is malformed"""
        with pytest.raises(ModelConfigError):
            infer_widths([LayerSpec("lstm", units=4)])
        with pytest.raises(ModelConfigError):
            infer_widths([LayerSpec("lstm", units=4, return_sequences=False), LayerSpec("dense", units=2)])

    def test_sequence_layer_after_collapse(self):
        """Recurrent layers cannot follow a collapsed sequence"""
        specs = [LayerSpec("take_last_step"), LayerSpec("lstm", units=1)]
        with pytest.raises(ModelConfigError):
            infer_widths(specs)

    def test_unknown_layer_kind(self):
        """Layer kinds are validated on construction"""
        with pytest.raises(ModelConfigError):
            LayerSpec("attention")

    def test_same_seed_same_weights(self):
        """Initialization is fully seeded"""
        a, b = build_model("lstm", 10, seed=4), build_model("lstm", 10, seed=4)
        for key, tensor in a.named_parameters().items():
            assert np.array_equal(tensor.data, b.named_parameters()[key].data)


class TestForward:
    """Model forward pass and predict"""

    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_output_is_one_speed_per_window(self, name, rng):
        """[B×w×3] in, [B] out, in the model's dtype"""
        model, windows = _ready(name, 10, rng)
        out = predict(model, windows[:3])
        assert out.shape == (3,)
        assert out.dtype == np.float32
        assert np.all(out >= 0)

    def test_wrong_window_length(self, rng):
        """Inputs must match the configured window"""
        model, _ = _ready("dnn_star", 10, rng)
        with pytest.raises(DimensionError):
            predict(model, rng.standard_normal((2, 12, 3)))
        with pytest.raises(DimensionError):
            model.forward(Tensor(np.zeros((2, 10, 4), dtype=np.float32)))

    def test_predict_needs_normalization(self, rng):
        """Models without fitted statistics cannot predict"""
        model = build_model("dnn_star", 10)
        with pytest.raises(NormalizationError):
            predict(model, rng.standard_normal((1, 10, 3)))

    def test_batchnorm_model_needs_statistics(self, rng):
        """Infer mode before any training pass fails on batchnorm layers"""
        model = build_model("carspeednet", 10)
        model.norm_stats = standardize("fit", rng.standard_normal((4, 10, 3)))
        with pytest.raises(StatisticsError):
            predict(model, rng.standard_normal((1, 10, 3)))

    def test_predict_is_deterministic(self, rng):
        """Infer mode gives identical outputs across calls"""
        model, windows = _ready("lstm", 10, rng)
        assert np.array_equal(predict(model, windows), predict(model, windows))

    def test_batch_independence(self, rng):
        """A window's prediction does not depend on its batch neighbours"""
        model, windows = _ready("carspeednet", 10, rng, Precision.WIDE)
        together = predict(model, windows)
        alone = np.concatenate([predict(model, windows[i:i + 1]) for i in range(len(windows))])
        assert np.allclose(together, alone, rtol=1e-10, atol=1e-12)

    def test_chunking_does_not_change_output(self, rng):
        """Chunked prediction matches a single pass"""
        model, windows = _ready("bilstm", 10, rng, Precision.WIDE)
        assert np.allclose(predict(model, windows, chunk_size=3), predict(model, windows))

    def test_output_is_clamped(self, rng):
        """Negative raw outputs are reported as zero speed"""
        model, windows = _ready("dnn_star", 10, rng)
        last = len(model.params) - 1
        model.params[last].weights["b"] = Tensor(np.array([-1e3], dtype=np.float32))
        assert np.all(predict(model, windows) == 0)

    def test_end_to_end_gradients(self, rng):
        """Model gradients pass a finite-difference check in wide precision"""
        model = build_model("resnet", 6, seed=2, precision=Precision.WIDE)
        x = Tensor(rng.standard_normal((3, 6, 3)))
        names = list(model.named_parameters())
        picked = [names[0], names[-2]]

        def f(p):
            params = model.snapshot()
            for key, tensor in zip(picked, p):
                index, name = key.split(".", 1)
                params[int(index)].weights[name] = tensor
            return reduce_sum(model.forward(x, "train", None, params))

        base = [model.named_parameters()[k] for k in picked]
        assert grad_check(f, base) < 1e-5

    def test_carspeednet_loss_gradients(self, rng):
        """Training-loss gradients of every CarSpeedNet tensor match central differences at their largest entry"""
        model = build_model("carspeednet", 5, seed=4, precision=Precision.WIDE)
        x = Tensor(rng.standard_normal((2, 5, 3)))
        y = Tensor(rng.standard_normal(2))
        tape = Tape()
        bound = model.bind(tape)
        tape.backward(mse_loss(model.forward(x, "train", None, bound), y))
        analytic = {k: t.grad.reshape(-1) for k, t in model.named_parameters(bound).items()}

        def loss_at(key, j, delta):
            params = model.snapshot()
            index, name = key.split(".", 1)
            params[int(index)].weights[name].data.reshape(-1)[j] += delta
            return mse_loss(model.forward(x, "train", None, params), y).item()

        epsilon = 1e-5
        for key, grad in analytic.items():
            # largest entry: recurrent kernels deep in the stack carry gradients near roundoff
            j = int(np.argmax(np.abs(grad)))
            numeric = (loss_at(key, j, epsilon) - loss_at(key, j, -epsilon)) / (2 * epsilon)
            err = abs(grad[j] - numeric) / max(1e-5, abs(grad[j]) + abs(numeric))
            assert err < 1e-4, key

    def test_bind_tracks_every_parameter(self):
        """Binding watches each trainable tensor on the tape"""
        model = build_model("dnn_star", 10)
        tape = Tape()
        bound = model.bind(tape)
        assert all(t.tape is tape for t in model.named_parameters(bound).values())
        assert len(model.named_parameters(bound)) == len(model.named_parameters())


class TestWeightsFile:
    """Binary weights files"""

    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        """Predictions after reload equal predictions before save"""
        model, windows = _ready("carspeednet", 10, rng)
        path = tmp_path / "model.csnw"
        save_weights(model, path)
        loaded = load_weights(path)
        assert loaded.name == "carspeednet"
        assert loaded.window_size == 10
        assert loaded.precision == Precision.NARROW
        assert np.array_equal(predict(loaded, windows), predict(model, windows))
        for key, buf in model.named_buffers().items():
            assert np.array_equal(loaded.named_buffers()[key], buf)

    def test_wide_round_trip(self, tmp_path, rng):
        """Wide models keep 64-bit weights"""
        model, windows = _ready("lstm", 8, rng, Precision.WIDE)
        save_weights(model, tmp_path / "wide.csnw")
        loaded = load_weights(tmp_path / "wide.csnw")
        assert loaded.dtype == np.float64
        assert np.array_equal(predict(loaded, windows), predict(model, windows))

    def test_bad_magic(self, tmp_path, rng):
        """Files that do not start with the magic are rejected"""
        model, _ = _ready("dnn_star", 10, rng)
        path = tmp_path / "m.csnw"
        save_weights(model, path)
        data = path.read_bytes()
        path.write_bytes(b"XXXX" + data[len(WEIGHTS_MAGIC):])
        with pytest.raises(MagicMismatchError):
            load_weights(path)

    def test_bad_version(self, tmp_path, rng):
        """Unknown format versions are rejected"""
        model, _ = _ready("dnn_star", 10, rng)
        path = tmp_path / "m.csnw"
        save_weights(model, path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load_weights(path)

    def test_truncated(self, tmp_path, rng):
        """A file cut short is reported as truncated"""
        model, _ = _ready("dnn_star", 10, rng)
        path = tmp_path / "m.csnw"
        save_weights(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(TruncatedWeightsError):
            load_weights(path)

    def test_corrupted_payload(self, tmp_path, rng):
        """A flipped payload byte fails the checksum"""
        model, _ = _ready("dnn_star", 10, rng)
        path = tmp_path / "m.csnw"
        save_weights(model, path)
        data = bytearray(path.read_bytes())
        data[-10] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load_weights(path)

    @pytest.mark.parametrize("precision,dtype", [(Precision.NARROW, "<f4"), (Precision.WIDE, "<f8")])
    def test_payload_has_one_scalar_width(self, tmp_path, rng, precision, dtype):
        """Weights and batchnorm buffers share the model scalar width"""
        model, _ = _ready("carspeednet", 10, rng, precision)
        path = tmp_path / "m.csnw"
        save_weights(model, path)
        entries = _header(path)["tensors"]
        assert {e["kind"] for e in entries} == {"weight", "buffer"}
        assert {e["dtype"] for e in entries} == {dtype}
        assert entries[-1]["offset"] + np.dtype(dtype).itemsize * int(np.prod(entries[-1]["shape"])) == (
            path.stat().st_size - 9 - _header_length(path) - 4
        )

    @pytest.mark.parametrize("key", ["precision", "specs", "tensors", "name"])
    def test_missing_header_key(self, tmp_path, rng, key):
        """A header lacking a required entry is a weights-file error"""
        model, _ = _ready("dnn_star", 10, rng)
        path = tmp_path / "m.csnw"
        save_weights(model, path)
        _rewrite_header(path, lambda header: header.pop(key))
        with pytest.raises(WeightsFileError):
            load_weights(path)

    def test_malformed_tensor_entry(self, tmp_path, rng):
        """A manifest entry without a shape is a weights-file error"""
        model, _ = _ready("dnn_star", 10, rng)
        path = tmp_path / "m.csnw"
        save_weights(model, path)

        def drop_name(header):
            del header["tensors"][0]["name"]

        _rewrite_header(path, drop_name)
        with pytest.raises(WeightsFileError):
            load_weights(path)
