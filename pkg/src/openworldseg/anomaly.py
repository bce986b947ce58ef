"""Distance-based anomalous-probability maps.

Two scores over the base prototypes only: one minus the max softmax
probability (class-dependent), and a ratio built from the per-pixel sum
of squared distances to all prototypes (class-agnostic, small near the
metric-space center where unknown features collect). A sigmoid gate
blends them, suppressing mid-range responses of the ratio score.
All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prototypes import PrototypeSet, class_probabilities, squared_distances
from .tensor import ShapeMismatch


@dataclass
class MixtureConfig:
    beta: float = 20.0
    gamma: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")


def mmsp_map(features, protos: PrototypeSet) -> np.ndarray:
    """1 - max_t p_t per pixel; ranges over [0, 1 - 1/N]."""
    p = class_probabilities(features, protos, include_novel=False)
    return 1.0 - p.max(axis=0)


def eds_sum(features, protos: PrototypeSet) -> np.ndarray:
    """Per-pixel sum of squared distances to all base prototypes."""
    return squared_distances(features, protos, include_novel=False).sum(axis=0)


def eds_map(distance_sum: np.ndarray) -> np.ndarray:
    """1 - S / max(S) over the image; the arg-max pixel maps to exactly 0."""
    s = np.asarray(distance_sum, dtype=np.float64)
    if s.size == 0:
        raise ValueError("eds_map needs at least one pixel")
    top = s.max()
    if top <= 0.0:
        raise ValueError("distance sum is zero everywhere; prototype geometry is degenerate")
    return 1.0 - s / top


def mix_maps(p_eds: np.ndarray, p_mmsp: np.ndarray, cfg: MixtureConfig | None = None) -> np.ndarray:
    """Sigmoid-gated blend: alpha*P_eds + (1-alpha)*P_mmsp with
    alpha = sigmoid(beta*(P_eds - gamma))."""
    cfg = cfg or MixtureConfig()
    p_eds = np.asarray(p_eds, dtype=np.float64)
    p_mmsp = np.asarray(p_mmsp, dtype=np.float64)
    if p_eds.shape != p_mmsp.shape:
        raise ShapeMismatch("mix_maps", p_eds.shape, p_mmsp.shape)
    alpha = 1.0 / (1.0 + np.exp(-cfg.beta * (p_eds - cfg.gamma)))
    return alpha * p_eds + (1.0 - alpha) * p_mmsp


def prob_to_u8(prob: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] probability map to 8-bit: round(255*p)."""
    p = np.asarray(prob, dtype=np.float64)
    return np.clip(np.rint(255.0 * p), 0, 255).astype(np.uint8)
