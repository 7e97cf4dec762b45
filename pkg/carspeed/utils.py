import json
import os
import struct
import sys
import zlib
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from loguru import logger

from carspeed.autograd import Precision, Tensor
from carspeed.errors import (
    ChecksumError,
    MagicMismatchError,
    TruncatedWeightsError,
    VersionMismatchError,
    WeightsFileError,
)

WEIGHTS_MAGIC = b"CSNW"
WEIGHTS_VERSION = 1
_PREFIX = struct.Struct("<4sBI")
_CRC = struct.Struct("<I")

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{line} - <level>{message}</level>"


def setup_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None):
    """Route loguru to stderr at ``level``; optionally mirror DEBUG and up into ``log_file``."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
    if log_file is not None:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        logger.add(str(log_file), level="DEBUG", format=LOG_FORMAT, colorize=False)
    return logger


def _payload_dtype(precision: Precision) -> np.dtype:
    return np.dtype("<f4") if precision is Precision.NARROW else np.dtype("<f8")


def save_weights(model, path: Union[str, Path]):
    """Serialize architecture, normalization statistics, trainable tensors and running buffers.

    Layout: magic, version byte, u32 header length, UTF-8 JSON header, little-endian float
    payload, CRC-32 of the payload. Every tensor, running statistics included, is stored at the
    model scalar width: ``<f4`` for narrow models, ``<f8`` for wide ones.
    """
    dtype = _payload_dtype(model.precision)
    manifest: List[Dict] = []
    chunks: List[bytes] = []
    offset = 0
    entries = [(name, t.data, "weight") for name, t in model.named_parameters().items()]
    entries += [(name, b, "buffer") for name, b in model.named_buffers().items()]
    for name, array, kind in entries:
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        manifest.append(
            {"name": name, "shape": list(np.shape(array)), "offset": offset, "kind": kind, "dtype": dtype.str}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    header = {
        "name": model.name,
        "window_size": model.window_size,
        "precision": model.precision.value,
        "dtype": dtype.str,
        "specs": [spec.to_dict() for spec in model.specs],
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))
    logger.info("Saved {} weights ({} tensors, {} bytes) to {}", model.name, len(manifest), len(payload), path)


def load_weights(path: Union[str, Path]):
    """Rebuild a model written by ``save_weights``; forward passes are identical to the saved model."""
    from carspeed.data_utils import NormStats
    from carspeed.models import LayerSpec, Model, infer_widths
    from carspeed.modules import init_params

    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < 4 or blob[:4] != WEIGHTS_MAGIC:
        raise MagicMismatchError(f"{path}: not a weights file (bad magic)")
    if len(blob) < _PREFIX.size:
        raise TruncatedWeightsError(f"{path}: truncated before header length")
    _, version, header_len = _PREFIX.unpack_from(blob)
    if version != WEIGHTS_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {WEIGHTS_VERSION}")
    body_start = _PREFIX.size + header_len
    if len(blob) < body_start + _CRC.size:
        raise TruncatedWeightsError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREFIX.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightsFileError(f"{path}: unreadable header: {e}") from e

    try:
        precision = Precision(header["precision"])
        specs = [LayerSpec.from_dict(d) for d in header["specs"]]
        tensors = header["tensors"]
        expected = sum(int(np.prod(t["shape"], dtype=np.int64)) * np.dtype(t["dtype"]).itemsize for t in tensors)
        model_name, window_size, stats = header["name"], int(header["window_size"]), header.get("norm_stats")
    except (KeyError, TypeError, ValueError) as e:
        raise WeightsFileError(f"{path}: malformed header: {e!r}") from e
    payload = blob[body_start:-_CRC.size]
    if len(payload) != expected:
        raise TruncatedWeightsError(f"{path}: payload holds {len(payload)} bytes, manifest needs {expected}")
    (stored_crc,) = _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    widths = infer_widths(specs)
    rng = np.random.default_rng(0)
    params = [init_params(spec, w, rng, precision.dtype) for spec, w in zip(specs, widths)]
    norm_stats = NormStats.from_dict(stats) if stats is not None else None
    model = Model(model_name, window_size, specs, params, norm_stats, precision)

    for entry in tensors:
        try:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            values = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]), count=count, offset=entry["offset"])
            values = values.reshape(entry["shape"])
            index, name = entry["name"].split(".", 1)
            layer = model.params[int(index)]
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise WeightsFileError(f"{path}: malformed tensor entry {entry!r}: {e!r}") from e
        if entry.get("kind") == "weight":
            if name not in layer.weights or layer.weights[name].shape != tuple(entry["shape"]):
                raise WeightsFileError(f"{path}: tensor {entry['name']} does not fit the architecture")
            layer.weights[name] = Tensor(values.astype(precision.dtype))
        else:
            if name not in layer.buffers:
                raise WeightsFileError(f"{path}: buffer {entry['name']} does not fit the architecture")
            layer.buffers[name][...] = values
    logger.info("Loaded {} weights from {}", model.name, path)
    return model

