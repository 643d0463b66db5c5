"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, input_shape=None, name: str = "X") -> np.ndarray:
    """Coerce to (N, C, H, W) float32 in [0, 1]; accepts a single (C, H, W) image."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be (N, C, H, W) images, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got range [{X.min()}, {X.max()}]")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(
            f"{name} has per-sample shape {X.shape[1:]}, the network expects {tuple(input_shape)}"
        )
    return np.ascontiguousarray(X)


def check_labels(y, n_samples: int, class_count: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce to integer class indices of length ``n_samples``."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"{name} must be 1-D with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(y, dtype=np.float64)):
            raise ValueError(f"{name} must contain integer class indices")
        y = rounded
    y = y.astype(np.int64)
    if len(y) and y.min() < 0:
        raise ValueError(f"{name} contains negative class indices")
    if class_count is not None and len(y) and y.max() >= class_count:
        raise ValueError(f"{name} contains class {y.max()}, model has {class_count} classes")
    return y
