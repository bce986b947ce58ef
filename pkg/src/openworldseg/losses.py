"""Training losses over the prototype metric space.

The cross-entropy term uses distance-softmax probabilities and pulls each
pixel toward its class prototype while pushing it from the rest; the
variance term is the plain squared distance to the class prototype and
only pulls. Both reduce by mean over non-ignored pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .prototypes import PrototypeSet
from .tensor import ShapeMismatch, Tensor

IGNORE_ID = 255


@dataclass
class LossConfig:
    lambda_vl: float = 0.01
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if self.lambda_vl < 0:
            raise ValueError(f"lambda_vl must be non-negative, got {self.lambda_vl}")


def _label_weights(labels: np.ndarray, n_classes: int, feat_shape, ignore_id: int):
    """One-hot weights (K at the channel axis) with ignored pixels zeroed.

    Returns (weights Tensor, valid pixel count).
    """
    labels = np.asarray(labels)
    expected = feat_shape[:-3] + feat_shape[-2:]
    if labels.shape != expected:
        raise ShapeMismatch("labels", labels.shape, expected)
    valid = labels != ignore_id
    bad = valid & (labels >= n_classes)
    if np.any(bad):
        offender = int(labels[bad].flat[0])
        raise ValueError(f"label id {offender} outside the {n_classes} known classes (and not {ignore_id})")

    idx = np.where(valid, labels, 0).astype(np.int64)
    onehot = np.zeros(labels.shape + (n_classes,), dtype=np.float32)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot *= valid[..., None]
    # (..., H, W, K) -> (..., K, H, W)
    onehot = np.moveaxis(onehot, -1, -3)
    return Tensor(onehot), int(valid.sum())


def _distances(features: Tensor, protos: PrototypeSet) -> Tensor:
    rows = Tensor(protos.base.astype(np.float32))
    return T.sqdist(features, rows)


def _zero_like_loss(features: Tensor) -> Tensor:
    # keeps the graph alive so backward still writes (zero) gradients
    return T.tsum(T.mul(features, 0.0))


def dce_loss(features: Tensor, labels, protos: PrototypeSet, cfg: LossConfig | None = None) -> Tensor:
    """Mean over labeled pixels of -log p_y under the distance softmax."""
    cfg = cfg or LossConfig()
    d = _distances(features, protos)
    weights, count = _label_weights(np.asarray(labels), protos.base_count, features.shape, cfg.ignore_id)
    if count == 0:
        return _zero_like_loss(features)
    logp = T.log_softmax(T.mul(d, -1.0))
    return T.mul(T.tsum(T.mul(weights, logp)), -1.0 / count)


def variance_loss(features: Tensor, labels, protos: PrototypeSet, cfg: LossConfig | None = None) -> Tensor:
    """Mean over labeled pixels of the squared distance to the class prototype."""
    cfg = cfg or LossConfig()
    d = _distances(features, protos)
    weights, count = _label_weights(np.asarray(labels), protos.base_count, features.shape, cfg.ignore_id)
    if count == 0:
        return _zero_like_loss(features)
    return T.mul(T.tsum(T.mul(weights, d)), 1.0 / count)


def hybrid_loss(features: Tensor, labels, protos: PrototypeSet, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    dce = dce_loss(features, labels, protos, cfg)
    vl = variance_loss(features, labels, protos, cfg)
    return T.add(dce, T.mul(vl, cfg.lambda_vl))
