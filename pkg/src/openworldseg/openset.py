"""Open-set composition: keep the close-set label unless the anomalous
probability exceeds the threshold, in which case emit the reserved
anomaly id. 254 flags anomalies; 255 stays reserved for ignored pixels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatch

ANOMALY_ID = 254
IGNORE_ID = 255


@dataclass
class OpenSetConfig:
    lambda_out: float | None = None  # None = calibrate from a clean split
    target_fpr: float = 0.05

    def __post_init__(self):
        if self.lambda_out is not None and not 0.0 <= self.lambda_out <= 1.0:
            raise ValueError(f"lambda_out must lie in [0, 1], got {self.lambda_out}")
        if not 0.0 <= self.target_fpr < 1.0:
            raise ValueError(f"target_fpr must lie in [0, 1), got {self.target_fpr}")


def openset_compose(closeset: np.ndarray, anomaly: np.ndarray, lambda_out: float) -> np.ndarray:
    """Strict inequality: a pixel flips to the anomaly id only when its
    anomalous probability is strictly above lambda_out."""
    closeset = np.asarray(closeset)
    anomaly = np.asarray(anomaly, dtype=np.float64)
    if closeset.shape != anomaly.shape:
        raise ShapeMismatch("openset_compose", closeset.shape, anomaly.shape)
    out = closeset.astype(np.uint8).copy()
    out[anomaly > lambda_out] = ANOMALY_ID
    return out


def calibrate_lambda(anomaly_maps, target_fpr: float) -> float:
    """Pick the smallest threshold whose strict-exceedance rate over clean
    calibration pixels stays within target_fpr.

    With n sorted values this is the (n-1-floor(fpr*n))-th order statistic;
    target_fpr 0 degenerates to the maximum.
    """
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError(f"target_fpr must lie in [0, 1), got {target_fpr}")
    if isinstance(anomaly_maps, np.ndarray):
        values = anomaly_maps.reshape(-1)
    else:
        maps = list(anomaly_maps)
        if not maps:
            raise ValueError("calibration split is empty")
        values = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in maps])
    if values.size == 0:
        raise ValueError("calibration split is empty")
    values = np.sort(values.astype(np.float64))
    allowed = int(np.floor(target_fpr * values.size))
    return float(values[values.size - 1 - allowed])
