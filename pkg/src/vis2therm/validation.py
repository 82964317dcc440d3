"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .data import BoundingBox
from .exceptions import ShapeError, ValidationError


def check_images(X, channels: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce ``X`` to a float32 ``(N, C, H, W)`` batch with values in [0, 1].

    A single ``(C, H, W)`` image is promoted to a batch of one.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    elif isinstance(X, Sequence) and not isinstance(X, np.ndarray):
        X = np.stack([np.asarray(x) for x in X]) if len(X) else np.empty((0, channels or 1, 0, 0))
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must have shape (N, C, H, W), got {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise ShapeError(f"{name} must have {channels} channel(s), got {arr.shape[1]}")
    if arr.shape[1] not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {arr.shape[1]}")
    if arr.size and not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]")
    return arr


def check_divisible(height: int, width: int, divisor: int, what: str = "input") -> None:
    if height % divisor or width % divisor:
        raise ShapeError(f"{what} size {height}x{width} must be divisible by {divisor}")


def check_paired(X: np.ndarray, y: np.ndarray) -> None:
    if len(X) != len(y):
        raise ShapeError(f"X and y have different lengths: {len(X)} != {len(y)}")
    if X.shape[2:] != y.shape[2:]:
        raise ShapeError(f"X and y spatial sizes differ: {X.shape[2:]} != {y.shape[2:]}")


def check_box_lists(y, n: int) -> list[tuple[BoundingBox, ...]]:
    """Validate per-image annotations: a list of ``n`` lists of boxes."""
    if len(y) != n:
        raise ShapeError(f"expected {n} annotation lists, got {len(y)}")
    out = []
    for i, boxes in enumerate(y):
        row = []
        for b in boxes:
            if not isinstance(b, BoundingBox):
                try:
                    b = BoundingBox(*b)
                except TypeError:
                    raise ValidationError(f"annotation {i}: cannot interpret {b!r} as a box") from None
            row.append(b)
        out.append(tuple(row))
    return out


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
