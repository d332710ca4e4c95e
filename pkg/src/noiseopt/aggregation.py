"""Aggregation of raw attention stacks into smoothed per-token maps.

A denoising step emits one attention map per (layer, head). Cross maps
relate image patches to prompt tokens, self maps relate patches to
patches. This module averages those stacks, drops the start-of-text
channel and renormalizes the rest with a softmax, and applies Gaussian
smoothing over the spatial axes. All operations are pure functions on
torch tensors and keep gradients intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor

NORMALIZATION_ATOL = 1e-5


class AttentionEntry(NamedTuple):
    layer: int
    head: int
    values: Tensor


@dataclass(frozen=True)
class AttentionStack:
    """Raw per-(layer, head) attention maps at a single grid resolution.

    Cross entries have shape (H, W, n_tokens); self entries have shape
    (H, W, H*W). Every map is non-negative and sums to one along its last
    axis per spatial location (softmax output).
    """

    entries: tuple
    grid: tuple
    kind: str  # "cross" or "self"

    def __post_init__(self):
        if self.kind not in ("cross", "self"):
            raise ValueError(f"kind must be 'cross' or 'self', got {self.kind!r}")

    def validate(self) -> None:
        h, w = self.grid
        for entry in self.entries:
            v = entry.values
            tag = f"entry (layer={entry.layer}, head={entry.head})"
            if v.ndim != 3 or v.shape[0] != h or v.shape[1] != w:
                raise ValueError(f"{tag}: expected spatial shape {(h, w)}, got {tuple(v.shape)}")
            if self.kind == "self" and v.shape[2] != h * w:
                raise ValueError(f"{tag}: self map needs {h * w} key channels, got {v.shape[2]}")
            if (v < 0).any():
                raise ValueError(f"{tag}: negative attention values")
            sums = v.sum(dim=-1)
            if (sums - 1.0).abs().max().item() > NORMALIZATION_ATOL:
                raise ValueError(f"{tag}: attention rows do not sum to 1")


@dataclass(frozen=True)
class AggregatedCrossAttentionMap:
    """Per-token spatial attention of shape (H, W, n_tokens)."""

    values: Tensor
    token_labels: tuple

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("cross map must have shape (H, W, n_tokens)")
        if self.values.shape[2] != len(self.token_labels):
            raise ValueError(
                f"{self.values.shape[2]} channels but {len(self.token_labels)} token labels"
            )

    @property
    def grid(self) -> tuple:
        return tuple(self.values.shape[:2])

    def channel(self, token: int) -> Tensor:
        if token not in self.token_labels:
            raise ValueError(f"token {token} not present in map (labels {self.token_labels})")
        return self.values[:, :, self.token_labels.index(token)]


@dataclass(frozen=True)
class AggregatedSelfAttentionMap:
    """Per-patch spatial attention of shape (H, W, H*W)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("self map must have shape (H, W, H*W)")
        h, w, k = self.values.shape
        if k != h * w:
            raise ValueError(f"self map needs {h * w} key channels, got {k}")

    @property
    def grid(self) -> tuple:
        return tuple(self.values.shape[:2])


@dataclass(frozen=True)
class TokenIndexSet:
    """Target-token positions in the prompt, plus the start-token position."""

    indices: tuple
    sot_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(self.indices))
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate target-token indices")
        if self.sot_index in self.indices:
            raise ValueError("start token cannot be a target token")
        if any(i < 0 for i in self.indices) or self.sot_index < 0:
            raise ValueError("token indices must be non-negative")

    def check_range(self, n_tokens: int) -> None:
        bad = [i for i in self.indices if i >= n_tokens]
        if bad or self.sot_index >= n_tokens:
            raise ValueError(f"token indices {bad or [self.sot_index]} out of range [0, {n_tokens})")


def _mean_of_stack(stack: AttentionStack) -> Tensor:
    if not stack.entries:
        raise ValueError("no attention entries")
    h, w = stack.grid
    ref_shape = tuple(stack.entries[0].values.shape)
    out = None
    for entry in stack.entries:
        v = entry.values
        if tuple(v.shape) != ref_shape or v.shape[0] != h or v.shape[1] != w:
            raise ValueError(
                f"shape mismatch in entry (layer={entry.layer}, head={entry.head}): "
                f"{tuple(v.shape)} vs expected {ref_shape}"
            )
        out = v if out is None else out + v
    return out / len(stack.entries)


def aggregate_cross(stack: AttentionStack, token_labels=None) -> AggregatedCrossAttentionMap:
    """Elementwise mean of all cross entries over layers and heads."""
    if stack.kind != "cross":
        raise ValueError(f"expected a cross stack, got kind={stack.kind!r}")
    mean = _mean_of_stack(stack)
    if token_labels is None:
        token_labels = tuple(range(mean.shape[2]))
    return AggregatedCrossAttentionMap(values=mean, token_labels=tuple(token_labels))


def aggregate_self(stack: AttentionStack) -> AggregatedSelfAttentionMap:
    """Elementwise mean of all self entries over layers and heads."""
    if stack.kind != "self":
        raise ValueError(f"expected a self stack, got kind={stack.kind!r}")
    return AggregatedSelfAttentionMap(values=_mean_of_stack(stack))


def reweight_tokens(
    map: AggregatedCrossAttentionMap,
    tokens: TokenIndexSet,
    temperature: float = 100.0,
) -> AggregatedCrossAttentionMap:
    """Drop the start-token channel and softmax the rest at each location.

    Logits are the raw attention values scaled by ``temperature``, so a
    modest gap between token channels saturates towards a one-hot
    distribution. The returned map has one channel fewer than the input.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = map.values.shape[2]
    if n < 2:
        raise ValueError("cross map needs at least 2 token channels")
    if tokens.sot_index not in map.token_labels:
        raise ValueError(f"start-token index {tokens.sot_index} out of range")
    sot_pos = map.token_labels.index(tokens.sot_index)
    keep = [i for i in range(n) if i != sot_pos]
    logits = map.values[:, :, keep] * temperature
    weights = torch.softmax(logits, dim=-1)
    labels = tuple(map.token_labels[i] for i in keep)
    return AggregatedCrossAttentionMap(values=weights, token_labels=labels)


def gaussian_kernel2d(kernel_size: int, sigma: float, dtype=torch.float64, device=None) -> Tensor:
    """Normalized 2-D Gaussian kernel w(d) = exp(-d^2 / (2 sigma^2))."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = kernel_size // 2
    coords = torch.arange(-half, half + 1, dtype=dtype, device=device)
    w1 = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = torch.outer(w1, w1)
    return kernel / kernel.sum()


def gaussian_smooth(values: Tensor, kernel_size: int = 3, sigma: float = 0.5) -> Tensor:
    """Smooth a (H, W, C) map over its two spatial axes, per channel.

    Uses reflect padding, so constant maps are fixed points and each
    channel's total mass is preserved.
    """
    if values.ndim != 3:
        raise ValueError("expected a (H, W, C) map")
    kernel = gaussian_kernel2d(kernel_size, sigma, dtype=values.dtype, device=values.device)
    if kernel_size == 1:
        return values * kernel[0, 0]  # kernel is [[1.0]]
    pad = kernel_size // 2
    h, w, c = values.shape
    if pad >= h or pad >= w:
        raise ValueError(f"map of shape {(h, w)} too small for kernel_size {kernel_size}")
    x = values.permute(2, 0, 1).unsqueeze(1)  # (C, 1, H, W)
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(x, kernel.view(1, 1, kernel_size, kernel_size))
    return out.squeeze(1).permute(1, 2, 0)


def smooth_cross(map: AggregatedCrossAttentionMap, kernel_size: int = 3, sigma: float = 0.5) -> AggregatedCrossAttentionMap:
    return AggregatedCrossAttentionMap(
        values=gaussian_smooth(map.values, kernel_size, sigma),
        token_labels=map.token_labels,
    )


def smooth_self(map: AggregatedSelfAttentionMap, kernel_size: int = 3, sigma: float = 0.5) -> AggregatedSelfAttentionMap:
    return AggregatedSelfAttentionMap(values=gaussian_smooth(map.values, kernel_size, sigma))
