"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from .noise import LatentShape


def as_latent_tensor(x, latent_shape: LatentShape, name: str = "X") -> Tensor:
    """Coerce a single latent to a float64 tensor of the expected shape."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a torch tensor or numpy array, got {type(x).__name__}")
    x = x.to(torch.float64)
    if tuple(x.shape) != latent_shape.dims:
        raise ValueError(f"{name} has shape {tuple(x.shape)}, expected {latent_shape.dims}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def as_latent_batch(X, latent_shape: LatentShape, name: str = "X") -> Tensor:
    """Coerce a batch of latents to float64 of shape (n,) + latent dims.

    A single latent is promoted to a batch of one.
    """
    if isinstance(X, (list, tuple)):
        X = torch.stack([as_latent_tensor(x, latent_shape, f"{name}[{i}]") for i, x in enumerate(X)])
        return X
    if isinstance(X, np.ndarray):
        X = torch.from_numpy(X)
    if not isinstance(X, Tensor):
        raise TypeError(f"{name} must be a torch tensor, numpy array or sequence, got {type(X).__name__}")
    X = X.to(torch.float64)
    if tuple(X.shape) == latent_shape.dims:
        X = X.unsqueeze(0)
    if X.ndim != 4 or tuple(X.shape[1:]) != latent_shape.dims:
        raise ValueError(
            f"{name} has shape {tuple(X.shape)}, expected (n,) + {latent_shape.dims}"
        )
    if not torch.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_threshold(value: float, name: str) -> float:
    value = float(value)
    if not 0 < value < 1:
        raise ValueError(f"threshold out of range: {name} must lie in (0, 1), got {value}")
    return value
