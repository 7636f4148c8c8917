"""Input validation helpers shared by the library modules and the estimator."""

from __future__ import annotations

import numpy as np
import torch


class ShapeError(ValueError):
    """Raised when operands violate a shape precondition."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class PaddingRequiredError(ShapeError):
    """Raised when a spatial extent is not divisible by the network stride."""


NETWORK_STRIDE = 16


def check_rank(rank: int) -> int:
    if rank not in (2, 3):
        raise ConfigError(f"rank must be 2 or 3, got {rank!r}")
    return rank


def check_spatial_divisible(shape, divisor: int = NETWORK_STRIDE) -> None:
    """Refuse spatial extents the 4-level encoder cannot round-trip.

    No padding is ever applied on the caller's behalf.
    """
    bad = [s for s in shape if s % divisor]
    if bad:
        raise PaddingRequiredError(
            f"spatial extents {tuple(shape)} must be divisible by {divisor}; "
            f"pad the input explicitly (offending extents: {bad})"
        )


def check_prob_map(t: torch.Tensor, name: str = "map") -> torch.Tensor:
    if t.dim() < 4 or t.shape[1] != 1:
        raise ShapeError(f"{name} must have shape [batch, 1, *spatial], got {tuple(t.shape)}")
    lo, hi = t.detach().min().item(), t.detach().max().item()
    if not (0.0 <= lo and hi <= 1.0):
        raise ShapeError(f"{name} entries must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
    return t


def check_image_batch(X, rank: int | None = None) -> np.ndarray:
    """Coerce images to float32 ``[n, 1, *spatial]`` and validate them.

    Accepts ``[n, *spatial]`` (channel added) or ``[n, 1, *spatial]``.
    """
    X = np.asarray(X, dtype=np.float32)
    if rank is None:
        rank = X.ndim - 2 if X.ndim in (4, 5) and X.shape[1] == 1 else X.ndim - 1
    check_rank(rank)
    if X.ndim == rank + 1:
        X = X[:, None]
    if X.ndim != rank + 2 or X.shape[1] != 1:
        raise ShapeError(f"expected images of shape [n, 1, *spatial] with rank {rank}, got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    check_spatial_divisible(X.shape[2:])
    return X


def check_label_batch(y, spatial_shape) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[1:] != tuple(spatial_shape):
        raise ShapeError(f"label maps {y.shape} do not match image spatial shape {tuple(spatial_shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ValueError("instance labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0):
        raise ValueError("instance labels must be non-negative")
    return y
