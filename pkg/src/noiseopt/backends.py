"""Denoiser backends that expose attention, differentiably.

The optimization pipeline only needs one capability from a model: run a
single denoising step on a latent and hand back the raw cross/self
attention stacks, with gradients flowing from any scalar of those stacks
to the latent. Two desk-scale backends ship here:

* ``SyntheticAttentionBackend`` computes attention in closed form from
  explicitly supplied projection matrices. Good for hand-checked oracles
  and finite-difference gradient checks.
* ``ToyDenoiser`` is a small randomly initialized attention network over
  grid patches with a fixed-variance denoising schedule, standing in for
  a full text-to-image pipeline at desk scale.

Real pipelines plug in through the same interface; the serialization
contract for out-of-process adapters is documented in docs/formats.md.
"""

from __future__ import annotations

import hashlib
import importlib
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .aggregation import AttentionEntry, AttentionStack, TokenIndexSet
from .noise import DEFAULT_DTYPE, LatentShape


class ScoringOnlyBackendError(RuntimeError):
    """Raised when a backend without a scheduler is asked to fully denoise."""


def derive_seed(root: int, *parts) -> int:
    """Stable sub-seed from a root seed and any hashable labels."""
    text = "/".join([str(int(root)), *[str(p) for p in parts]])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass(frozen=True)
class PromptSpec:
    """Abstract prompt: token embeddings plus the target-token set."""

    token_embeddings: Tensor  # (n_tokens, embed_dim)
    target_tokens: TokenIndexSet
    guidance_scale: float = 7.5
    num_denoise_steps: int = 50

    def __post_init__(self):
        if self.token_embeddings.ndim != 2 or self.token_embeddings.shape[0] < 2:
            raise ValueError("token_embeddings must be (n_tokens >= 2, embed_dim)")
        if self.guidance_scale <= 0:
            raise ValueError(f"guidance_scale must be positive, got {self.guidance_scale}")
        if self.num_denoise_steps < 1:
            raise ValueError("num_denoise_steps must be >= 1")
        self.target_tokens.check_range(self.n_tokens)

    @property
    def n_tokens(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.token_embeddings.shape[1]


@dataclass(frozen=True)
class DenoiseStepResult:
    predicted_noise: Tensor
    cross_stack: AttentionStack
    self_stack: AttentionStack
    timestep: int


def token_embedding_table(token_ids, embed_dim: int, vocab_seed: int = 0, dtype=DEFAULT_DTYPE) -> Tensor:
    """Fixed random embedding per vocabulary id (no text encoder)."""
    rows = []
    for tid in token_ids:
        gen = torch.Generator()
        gen.manual_seed(derive_seed(vocab_seed, "vocab", int(tid)) & 0x7FFFFFFFFFFFFFFF)
        rows.append(torch.randn(embed_dim, generator=gen, dtype=dtype))
    return torch.stack(rows)


def make_prompt(
    token_ids,
    target_indices,
    embed_dim: int = 32,
    sot_index: int = 0,
    guidance_scale: float = 7.5,
    num_denoise_steps: int = 50,
    vocab_seed: int = 0,
    dtype=DEFAULT_DTYPE,
) -> PromptSpec:
    """Prompt from vocabulary ids; position 0 is the start token by convention."""
    return PromptSpec(
        token_embeddings=token_embedding_table(token_ids, embed_dim, vocab_seed, dtype),
        target_tokens=TokenIndexSet(indices=tuple(target_indices), sot_index=sot_index),
        guidance_scale=guidance_scale,
        num_denoise_steps=num_denoise_steps,
    )


class DenoiserBackend:
    """Interface every backend implements.

    Attributes: ``latent_shape``, ``grid`` and ``differentiable``.
    ``denoise_step`` must be deterministic for identical inputs and emit
    attention from the prompt-conditioned branch only.
    """

    latent_shape: LatentShape
    grid: tuple
    differentiable: bool = True

    def denoise_step(self, latent: Tensor, prompt: PromptSpec, t: int) -> DenoiseStepResult:
        raise NotImplementedError

    def full_denoise(self, latent: Tensor, prompt: PromptSpec) -> Tensor:
        raise ScoringOnlyBackendError("scoring-only backend: no denoising schedule")

    def _check_step_inputs(self, latent: Tensor, prompt: PromptSpec, t: int) -> None:
        if tuple(latent.shape) != self.latent_shape.dims:
            raise ValueError(
                f"latent shape {tuple(latent.shape)} does not match backend shape {self.latent_shape.dims}"
            )
        if not 1 <= t <= prompt.num_denoise_steps:
            raise ValueError(f"unsupported timestep {t} (expected 1..{prompt.num_denoise_steps})")


def full_denoise(backend: DenoiserBackend, latent: Tensor, prompt: PromptSpec) -> Tensor:
    """Run the backend's full denoising schedule on a latent."""
    return backend.full_denoise(latent, prompt)


def _patches(latent: Tensor) -> Tensor:
    """(C, H, W) -> (H*W, C) patch features in row-major order."""
    c = latent.shape[0]
    return latent.reshape(c, -1).transpose(0, 1)


@dataclass(frozen=True)
class SyntheticProjections:
    """Explicit linear projections driving the synthetic backend.

    Shapes: w_query (C, d), w_key_tokens (embed_dim, d),
    w_key_patches (C, d), w_value_tokens (embed_dim, C).
    """

    w_query: Tensor
    w_key_tokens: Tensor
    w_key_patches: Tensor
    w_value_tokens: Tensor

    def __post_init__(self):
        c, d = self.w_query.shape
        if self.w_key_tokens.shape[1] != d:
            raise ValueError("w_key_tokens width must match w_query width")
        if tuple(self.w_key_patches.shape) != (c, d):
            raise ValueError(f"w_key_patches must have shape {(c, d)}")
        if self.w_value_tokens.shape != (self.w_key_tokens.shape[0], c):
            raise ValueError("w_value_tokens must map embed_dim to latent channels")

    @classmethod
    def zeros(cls, channels: int, embed_dim: int, proj_dim: int, dtype=DEFAULT_DTYPE) -> "SyntheticProjections":
        return cls(
            w_query=torch.zeros(channels, proj_dim, dtype=dtype),
            w_key_tokens=torch.zeros(embed_dim, proj_dim, dtype=dtype),
            w_key_patches=torch.zeros(channels, proj_dim, dtype=dtype),
            w_value_tokens=torch.zeros(embed_dim, channels, dtype=dtype),
        )


class SyntheticAttentionBackend(DenoiserBackend):
    """Attention computed exactly as softmax(Q K^T / sqrt(d)).

    Patch features are the latent's channel vectors, queries and keys are
    single linear projections, and there is exactly one cross and one
    self entry (layer 0, head 0). Scoring-only: no denoising schedule.
    """

    def __init__(self, projections: SyntheticProjections, latent_shape: LatentShape):
        self.projections = projections
        self.latent_shape = latent_shape
        self.grid = (latent_shape.height, latent_shape.width)
        self.differentiable = True
        if projections.w_query.shape[0] != latent_shape.channels:
            raise ValueError(
                f"w_query expects {projections.w_query.shape[0]} channels, "
                f"latent has {latent_shape.channels}"
            )

    def denoise_step(self, latent: Tensor, prompt: PromptSpec, t: int) -> DenoiseStepResult:
        self._check_step_inputs(latent, prompt, t)
        p = self.projections
        if prompt.embed_dim != p.w_key_tokens.shape[0]:
            raise ValueError(
                f"prompt embed_dim {prompt.embed_dim} does not match projections "
                f"({p.w_key_tokens.shape[0]})"
            )
        h, w = self.grid
        d = p.w_query.shape[1]
        x = _patches(latent)
        q = x @ p.w_query
        k_tok = prompt.token_embeddings @ p.w_key_tokens
        cross = torch.softmax(q @ k_tok.transpose(0, 1) / math.sqrt(d), dim=-1)
        k_pat = x @ p.w_key_patches
        self_attn = torch.softmax(q @ k_pat.transpose(0, 1) / math.sqrt(d), dim=-1)
        predicted = (cross @ (prompt.token_embeddings @ p.w_value_tokens)).transpose(0, 1)
        return DenoiseStepResult(
            predicted_noise=predicted.reshape(self.latent_shape.dims),
            cross_stack=AttentionStack(
                entries=(AttentionEntry(0, 0, cross.reshape(h, w, -1)),),
                grid=self.grid,
                kind="cross",
            ),
            self_stack=AttentionStack(
                entries=(AttentionEntry(0, 0, self_attn.reshape(h, w, -1)),),
                grid=self.grid,
                kind="self",
            ),
            timestep=t,
        )


def build_synthetic_backend(projections: SyntheticProjections, latent_shape: LatentShape) -> SyntheticAttentionBackend:
    return SyntheticAttentionBackend(projections, latent_shape)


class ToyDenoiser(DenoiserBackend):
    """Small random attention network over grid patches.

    Each layer applies multi-head self-attention, multi-head
    cross-attention against the token embeddings, and a tanh MLP, all
    with residual connections. Every head's attention map is recorded.
    The predicted noise is the latent plus a small learned readout, which
    keeps the fixed-variance schedule contractive.
    """

    def __init__(
        self,
        seed: int,
        latent_shape: LatentShape,
        grid: tuple | None = None,
        embed_dim: int = 32,
        n_heads: int = 2,
        n_layers: int = 2,
        text_dim: int = 32,
        attn_gain: float = 6.0,
        readout_scale: float = 0.1,
        dtype=DEFAULT_DTYPE,
    ):
        grid = tuple(grid) if grid is not None else (latent_shape.height, latent_shape.width)
        if grid != (latent_shape.height, latent_shape.width):
            raise ValueError(
                f"toy backend requires grid == latent spatial dims, got {grid} vs "
                f"{(latent_shape.height, latent_shape.width)}"
            )
        if grid[0] * grid[1] < 4:
            raise ValueError("grid area must be >= 4")
        if n_heads < 1 or n_layers < 1:
            raise ValueError("n_heads and n_layers must be >= 1")
        if embed_dim % n_heads != 0:
            raise ValueError(f"embed_dim {embed_dim} not divisible by n_heads {n_heads}")
        self.seed = int(seed)
        self.latent_shape = latent_shape
        self.grid = grid
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.text_dim = text_dim
        self.attn_gain = attn_gain
        self.readout_scale = readout_scale
        self.dtype = dtype
        self.differentiable = True

        gen = torch.Generator()
        gen.manual_seed(derive_seed(self.seed, "toy-denoiser") & 0x7FFFFFFFFFFFFFFF)
        c = latent_shape.channels
        hw = grid[0] * grid[1]
        d = embed_dim

        def init(*shape, scale):
            return torch.randn(*shape, generator=gen, dtype=dtype) * scale

        self.w_in = init(c, d, scale=1.0 / math.sqrt(c))
        self.pos = init(hw, d, scale=1.0)
        self.t_emb = init(d, scale=1.0)
        self.layers = []
        for _ in range(n_layers):
            self.layers.append(
                {
                    "self_q": init(d, d, scale=1.0 / math.sqrt(d)),
                    "self_k": init(d, d, scale=1.0 / math.sqrt(d)),
                    "self_v": init(d, d, scale=1.0 / math.sqrt(d)),
                    "cross_q": init(d, d, scale=1.0 / math.sqrt(d)),
                    "cross_k": init(text_dim, d, scale=1.0 / math.sqrt(text_dim)),
                    "cross_v": init(text_dim, d, scale=1.0 / math.sqrt(text_dim)),
                    "mlp": init(d, d, scale=1.0 / math.sqrt(d)),
                }
            )
        self.w_out = init(d, c, scale=1.0 / math.sqrt(d))

    def _split_heads(self, x: Tensor) -> Tensor:
        # (P, d) -> (heads, P, d_head)
        p = x.shape[0]
        return x.reshape(p, self.n_heads, -1).permute(1, 0, 2)

    def denoise_step(self, latent: Tensor, prompt: PromptSpec, t: int) -> DenoiseStepResult:
        self._check_step_inputs(latent, prompt, t)
        if prompt.embed_dim != self.text_dim:
            raise ValueError(
                f"prompt embed_dim {prompt.embed_dim} does not match backend text_dim {self.text_dim}"
            )
        h_grid, w_grid = self.grid
        d_head = self.embed_dim // self.n_heads
        scale = self.attn_gain / math.sqrt(d_head)
        e = prompt.token_embeddings.to(self.dtype)

        h = _patches(latent) @ self.w_in + self.pos + (t / prompt.num_denoise_steps) * self.t_emb
        cross_entries = []
        self_entries = []
        for layer_idx, layer in enumerate(self.layers):
            q = self._split_heads(h @ layer["self_q"])
            k = self._split_heads(h @ layer["self_k"])
            v = self._split_heads(h @ layer["self_v"])
            attn = torch.softmax(q @ k.transpose(1, 2) * scale, dim=-1)  # (heads, P, P)
            for head in range(self.n_heads):
                self_entries.append(
                    AttentionEntry(layer_idx, head, attn[head].reshape(h_grid, w_grid, -1))
                )
            h = h + (attn @ v).permute(1, 0, 2).reshape(h.shape[0], self.embed_dim)

            q = self._split_heads(h @ layer["cross_q"])
            k = self._split_heads(e @ layer["cross_k"])
            v = self._split_heads(e @ layer["cross_v"])
            attn = torch.softmax(q @ k.transpose(1, 2) * scale, dim=-1)  # (heads, P, n)
            for head in range(self.n_heads):
                cross_entries.append(
                    AttentionEntry(layer_idx, head, attn[head].reshape(h_grid, w_grid, -1))
                )
            h = h + (attn @ v).permute(1, 0, 2).reshape(h.shape[0], self.embed_dim)
            h = h + torch.tanh(h @ layer["mlp"])

        predicted = latent + self.readout_scale * (h @ self.w_out).transpose(0, 1).reshape(
            self.latent_shape.dims
        )
        return DenoiseStepResult(
            predicted_noise=predicted,
            cross_stack=AttentionStack(entries=tuple(cross_entries), grid=self.grid, kind="cross"),
            self_stack=AttentionStack(entries=tuple(self_entries), grid=self.grid, kind="self"),
            timestep=t,
        )

    def full_denoise(self, latent: Tensor, prompt: PromptSpec) -> Tensor:
        """Fixed-variance contraction driven by a linear beta schedule."""
        steps = prompt.num_denoise_steps
        betas = torch.linspace(1e-4, 2e-2, steps, dtype=self.dtype)
        z = latent
        for t in range(steps, 0, -1):
            eps_hat = self.denoise_step(z, prompt, t).predicted_noise
            beta = betas[t - 1]
            z = torch.sqrt(1.0 - beta) * (z - beta * eps_hat)
        return z


def build_toy_denoiser(
    seed: int,
    latent_shape: LatentShape,
    grid: tuple | None = None,
    embed_dim: int = 32,
    n_heads: int = 2,
    n_layers: int = 2,
    **kwargs,
) -> ToyDenoiser:
    return ToyDenoiser(
        seed=seed,
        latent_shape=latent_shape,
        grid=grid,
        embed_dim=embed_dim,
        n_heads=n_heads,
        n_layers=n_layers,
        **kwargs,
    )


def load_adapter_backend(factory: str, **kwargs) -> DenoiserBackend:
    """Load an external backend from a ``module:callable`` factory string.

    The callable receives ``kwargs`` and must return an object honoring
    the DenoiserBackend interface (see docs/formats.md for the adapter
    contract, including the array-container record layout).
    """
    if ":" not in factory:
        raise ValueError(f"adapter factory must look like 'module:callable', got {factory!r}")
    module_name, _, attr = factory.partition(":")
    module = importlib.import_module(module_name)
    try:
        fn = getattr(module, attr)
    except AttributeError as exc:
        raise ValueError(f"module {module_name!r} has no attribute {attr!r}") from exc
    backend = fn(**kwargs)
    for required in ("denoise_step", "latent_shape", "grid"):
        if not hasattr(backend, required):
            raise TypeError(f"adapter backend from {factory!r} lacks {required!r}")
    return backend
