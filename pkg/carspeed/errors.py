"""
Exception hierarchy for carspeed.

Every error raised on purpose by the package derives from ``CarSpeedError`` so the CLI
can map it to exit code 1; the concrete classes also inherit the builtin they specialise.
"""

from typing import Optional


class CarSpeedError(Exception):
    """Base class for all carspeed errors"""


class DimensionError(CarSpeedError, ValueError):
    """Tensor shapes are incompatible for an operation"""


class TapeError(CarSpeedError, RuntimeError):
    """Misuse of a gradient tape (consumed tape, foreign tensor, non-scalar loss)"""


class DataFormatError(CarSpeedError, ValueError):
    """A session file is malformed"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class MonotonicityError(DataFormatError):
    """Timestamps are not strictly increasing"""


class GdopRejectedError(CarSpeedError):
    """No GPS fix in the session ever reaches the GDOP threshold"""


class SignalConfigError(CarSpeedError, ValueError):
    """Invalid filter or resampling parameters"""


class NormalizationError(CarSpeedError, ValueError):
    """Input standardization was used before fitting or on a degenerate axis"""


class StatisticsError(CarSpeedError, RuntimeError):
    """Batch normalization running statistics were read before any update"""


class ModelConfigError(CarSpeedError, ValueError):
    """Unknown architecture, bad window size or incompatible layer stack"""


class WeightsFileError(CarSpeedError):
    """Base class for weights-file decoding errors"""


class MagicMismatchError(WeightsFileError):
    pass


class VersionMismatchError(WeightsFileError):
    pass


class TruncatedWeightsError(WeightsFileError):
    pass


class ChecksumError(WeightsFileError):
    pass


class TrainingError(CarSpeedError, RuntimeError):
    """Training could not proceed"""


class NonFiniteGradientError(TrainingError):
    def __init__(self, param: str, step: int):
        self.param = param
        self.step = step
        super().__init__(f"non-finite gradient for parameter '{param}' at step {step}")


class NonFiniteLossError(TrainingError):
    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")


class SweepError(CarSpeedError, RuntimeError):
    """A sweep cell failed; carries the offending window size"""

    def __init__(self, window_size: int, cause: Exception):
        self.window_size = window_size
        super().__init__(f"window size {window_size}: {cause}")


class SplitError(CarSpeedError, ValueError):
    """Not enough sessions or windows to form train/validation/test splits"""


class SimulationError(CarSpeedError, ValueError):
    """Invalid drive-simulation request"""


class MetricsError(CarSpeedError, ValueError):
    """Invalid metric inputs or an inconsistent report"""
