"""Input validation helpers for point cloud arrays."""

from __future__ import annotations

import numpy as np

from .netcore import ContractViolation


def check_clouds(X, n_points: int | None = None, allow_single: bool = False) -> np.ndarray:
    """Validate a stack of clouds and return it as float64 ``(n_clouds, n_points, 3)``.

    With ``allow_single`` a lone ``(n, 3)`` cloud is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if allow_single and X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != 3:
        raise ContractViolation(f"expected clouds of shape (n_clouds, n_points, 3), got {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ContractViolation(f"need at least one cloud with at least one point, got {X.shape}")
    if not np.isfinite(X).all():
        raise ContractViolation("clouds contain NaN or infinite coordinates")
    if n_points is not None and X.shape[1] != n_points:
        raise ContractViolation(f"expected {n_points} points per cloud, got {X.shape[1]}")
    return X


def check_labels(y, n_clouds: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_clouds:
        raise ContractViolation(f"expected {n_clouds} labels, got shape {y.shape}")
    return y
