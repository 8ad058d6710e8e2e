"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeError
from .network import N_SCALES

SIZE_MULTIPLE = 2 ** N_SCALES


def check_images(X, n_channels: int = 3) -> np.ndarray:
    """Coerce to a float64 ``(n, c, H, W)`` batch in ``[0, 1]``.

    A single ``(c, H, W)`` image is promoted to a batch of one.  Height and
    width must be multiples of 32.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected images shaped (n, c, H, W), got {X.shape}")
    if X.shape[1] != n_channels:
        raise ShapeError(f"expected {n_channels} channels, got {X.shape[1]}")
    if X.shape[2] % SIZE_MULTIPLE or X.shape[3] % SIZE_MULTIPLE:
        raise ShapeError(f"height and width must be divisible by {SIZE_MULTIPLE}, got {X.shape[2:]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_masks(y, n_images: int, size) -> np.ndarray:
    """Coerce to a uint8 ``(n, 1, H, W)`` binary batch matching the images."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.shape != (n_images, 1) + tuple(size):
        raise ShapeError(f"masks of shape {y.shape} do not match {n_images} images of size {tuple(size)}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be strictly binary")
    return y.astype(np.uint8)
