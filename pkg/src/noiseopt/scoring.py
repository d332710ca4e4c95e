"""Response and conflict scores over aggregated attention maps.

Two diagnostics decide whether an initial noise is worth keeping. The
cross-attention response score is high when some target token never
attains a strong spatial response (the token's subject tends to go
missing). The self-attention conflict score is high when the
self-attention maps anchored at two target tokens' peak locations overlap
(the subjects tend to fuse). A noise is valid when both scores fall below
their thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .aggregation import (
    AggregatedCrossAttentionMap,
    AggregatedSelfAttentionMap,
    TokenIndexSet,
)

PAIRWISE_OVERLAP_MAX = 0.5


@dataclass(frozen=True)
class ScorePair:
    """Both scores plus the validity verdict against (tau_c, tau_s)."""

    cross_score: float
    self_score: float
    valid: bool
    thresholds: tuple

    def __post_init__(self):
        if not -1e-9 <= self.cross_score <= 1 + 1e-9:
            raise ValueError(f"cross score {self.cross_score} outside [0, 1]")
        if not -1e-9 <= self.self_score <= PAIRWISE_OVERLAP_MAX + 1e-9:
            raise ValueError(f"self score {self.self_score} outside [0, 0.5]")

    @property
    def total(self) -> float:
        return self.cross_score + self.self_score


def cross_attention_response_score(map: AggregatedCrossAttentionMap, tokens: TokenIndexSet):
    """1 minus the smallest per-target-token spatial maximum.

    Expects post-softmax values, so the result lives in [0, 1]. Returns a
    0-dim tensor when the map carries gradients.
    """
    if not tokens.indices:
        raise ValueError("no target tokens")
    per_token_max = [map.channel(t).max() for t in tokens.indices]
    return 1.0 - torch.stack(per_token_max).min()


def argmax_coordinates(map: AggregatedCrossAttentionMap, token: int) -> tuple:
    """(x, y) of the token channel's maximum; ties break row-major-first."""
    channel = map.channel(token)
    flat = int(torch.argmax(channel.reshape(-1)).item())
    w = channel.shape[1]
    return (flat // w, flat % w)


def pairwise_overlap(a: Tensor, b: Tensor):
    """sum(min(a, b)) / sum(a + b) for non-negative maps; in [0, 0.5]."""
    denom = (a + b).sum()
    if denom.item() <= 0:
        raise ValueError("degenerate self-attention maps")
    return torch.minimum(a, b).sum() / denom


def self_attention_conflict_score(
    self_map: AggregatedSelfAttentionMap,
    cross_map: AggregatedCrossAttentionMap,
    tokens: TokenIndexSet,
):
    """Mean pairwise overlap of the target tokens' anchored self maps.

    Each target token is anchored at the coordinates of its maximal
    cross-attention value; the self-attention map at that location is a
    distribution over all patches. With a single target token there is no
    pair to compare and the score is 0.
    """
    if not tokens.indices:
        raise ValueError("no target tokens")
    if self_map.grid != cross_map.grid:
        raise ValueError(f"grid mismatch: self {self_map.grid} vs cross {cross_map.grid}")
    anchored = []
    for t in tokens.indices:
        x, y = argmax_coordinates(cross_map, t)
        anchored.append(self_map.values[x, y, :])
    n = len(anchored)
    if n == 1:
        return torch.zeros((), dtype=self_map.values.dtype, device=self_map.values.device)
    overlaps = [
        pairwise_overlap(anchored[i], anchored[j])
        for i in range(n)
        for j in range(i + 1, n)
    ]
    return torch.stack(overlaps).mean()


def evaluate_validity(cross_score: float, self_score: float, tau_c: float, tau_s: float) -> ScorePair:
    """Strict less-than test of both scores against their thresholds."""
    for name, tau in (("tau_c", tau_c), ("tau_s", tau_s)):
        if not 0 < tau < 1:
            raise ValueError(f"{name} must lie in (0, 1), got {tau}")
    cross_score = float(cross_score)
    self_score = float(self_score)
    return ScorePair(
        cross_score=cross_score,
        self_score=self_score,
        valid=(cross_score < tau_c) and (self_score < tau_s),
        thresholds=(tau_c, tau_s),
    )
