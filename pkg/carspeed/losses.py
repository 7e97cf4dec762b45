import numpy as np

from carspeed.autograd import Tensor, ewise, reduce_sum, scale
from carspeed.errors import DimensionError


def mse_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """(1 / 2N) · Σ (gt - pred)²; d/dpred_j = (pred_j - gt_j) / N."""
    if pred.ndim != 1 or gt.ndim != 1 or pred.shape != gt.shape:
        raise DimensionError(f"mse_loss needs equal-length vectors, got {pred.shape} and {gt.shape}")
    n = pred.shape[0]
    if n == 0:
        raise DimensionError("mse_loss on an empty batch")
    diff = ewise("sub", gt, pred)
    return scale(reduce_sum(ewise("mul", diff, diff)), 1.0 / (2 * n))


def mse_value(pred: np.ndarray, gt: np.ndarray) -> float:
    """The same loss on plain arrays, for validation passes that record no tape."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise DimensionError(f"mse_value needs equal-length vectors, got {pred.shape} and {gt.shape}")
    if len(pred) == 0:
        raise DimensionError("mse_value on an empty set")
    return float(np.sum((gt - pred) ** 2) / (2 * len(pred)))
