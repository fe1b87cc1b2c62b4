"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .sim import RayObservation


def as_observation_matrix(X, n_rays: int) -> np.ndarray:
    """Coerce observations to a ``(n, 2 * n_rays)`` float matrix.

    Accepts a single ``RayObservation``, a sequence of them, or an array whose
    rows are ``[depths..., textures...]``.
    """
    if isinstance(X, RayObservation):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], RayObservation):
        X = np.stack([o.to_vector() for o in X])
    X = check_array(X, dtype=float, ensure_2d=False)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != 2 * n_rays:
        raise ValueError(f"observations must have {n_rays} rays ({2 * n_rays} columns), got {X.shape[1]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y


def check_unit_rows(D, atol: float = 1e-6) -> np.ndarray:
    D = check_array(D, dtype=float, ensure_2d=False)
    D = np.atleast_2d(D)
    norms = np.linalg.norm(D, axis=1)
    if np.any((np.abs(norms - 1.0) > atol) & (norms > 0)):
        raise ValueError("descriptors must be unit-norm (or all-zero)")
    return D
