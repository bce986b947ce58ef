"""Fixed one-hot prototypes and distance-softmax classification.

Class t is represented by a vector that is T at index t and 0 elsewhere,
so all base prototypes are pairwise equidistant (squared distance 2*T^2)
and never move during training. Scoring runs in float64.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatch, Tensor


def _as_array(features) -> np.ndarray:
    if isinstance(features, Tensor):
        return features.data
    return np.asarray(features)


class PrototypeSet:
    """Base one-hot prototypes plus any registered novel prototypes."""

    def __init__(self, base: np.ndarray, t_value: float):
        self._base = base
        self.t_value = float(t_value)
        self.novel_prototypes: list[np.ndarray] = []

    @property
    def dim(self) -> int:
        return self._base.shape[1]

    @property
    def base_count(self) -> int:
        return self._base.shape[0]

    @property
    def base(self) -> np.ndarray:
        view = self._base.view()
        view.flags.writeable = False
        return view

    def add_novel(self, vector) -> int:
        """Register a free prototype; returns the class id it answers to."""
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ShapeMismatch("add_novel", vec.shape, (self.dim,))
        self.novel_prototypes.append(vec)
        return self.base_count + len(self.novel_prototypes) - 1

    def all_rows(self) -> np.ndarray:
        if not self.novel_prototypes:
            return self._base
        return np.vstack([self._base, np.stack(self.novel_prototypes)])


def make_prototypes(n_classes: int, t_value: float) -> PrototypeSet:
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes for a metric space, got {n_classes}")
    if t_value <= 0:
        raise ValueError(f"prototype scale must be positive, got {t_value}")
    base = np.eye(n_classes, dtype=np.float64) * float(t_value)
    return PrototypeSet(base, t_value)


def squared_distances(features, protos: PrototypeSet, include_novel: bool = True) -> np.ndarray:
    """(K, H, W) map of squared Euclidean distances to every prototype."""
    f = _as_array(features).astype(np.float64)
    if f.ndim != 3 or f.shape[0] != protos.dim:
        raise ShapeMismatch("squared_distances", f.shape, (protos.dim, "H", "W"))
    rows = protos.all_rows() if include_novel else protos.base
    diff = f[None, :, :, :] - rows[:, :, None, None]
    return np.sum(diff * diff, axis=1)


def class_probabilities(features, protos: PrototypeSet, include_novel: bool = True) -> np.ndarray:
    """Distance softmax: p_t = exp(-d_t) / sum_t' exp(-d_t'), max-shifted."""
    d = squared_distances(features, protos, include_novel=include_novel)
    z = -d
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def closeset_map(features, protos: PrototypeSet) -> np.ndarray:
    """Per-pixel argmax of base-class probability; ties go to the lowest id.

    Equivalent to the argmin of squared distance over base prototypes.
    """
    d = squared_distances(features, protos, include_novel=False)
    return np.argmin(d, axis=0).astype(np.uint8)
