"""End-to-end noise search: evaluate, optimize, resample, fall back.

One round fixes a base noise draw, reparameterizes it through a learnable
(mu, sigma) pair initialized at (0, 1), and runs up to ``max_steps`` Adam
updates on the joint loss. Validity is tested before every update; a
valid noise returns immediately. Exhausted rounds park their final noise
in a pool and a fresh draw starts the next round. If no round reaches the
valid region, the pool entry with the smallest score sum wins.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import torch
from torch import Tensor

from .aggregation import (
    aggregate_cross,
    aggregate_self,
    reweight_tokens,
    smooth_cross,
    smooth_self,
)
from .backends import DenoiserBackend, PromptSpec, derive_seed
from .noise import (
    AdamState,
    BaseNoise,
    DivergentOptimizationError,
    LatentShape,
    NoiseDistribution,
    adam_update,
    joint_loss,
    kl_to_standard,
    sample_standard,
)
from .scoring import (
    ScorePair,
    cross_attention_response_score,
    evaluate_validity,
    self_attention_conflict_score,
)

VALID = "valid"
EXHAUSTED = "exhausted"
POOL_FALLBACK = "pool_fallback"


@dataclass(frozen=True)
class OptimizationConfig:
    latent_shape: LatentShape
    tau_c: float = 0.2
    tau_s: float = 0.3
    max_steps: int = 50
    max_rounds: int = 5
    lambda_cross: float = 1.0
    lambda_self: float = 1.0
    lambda_kl: float = 500.0
    lr: float = 1e-2
    seed: int = 0
    smoothing_kernel_size: int = 3
    smoothing_sigma: float = 0.5
    softmax_temperature: float = 100.0
    sigma_floor: float = 1e-4
    kl_reduction: str = "mean"
    # None scores at t = num_denoise_steps; several timesteps average.
    score_timesteps: tuple | None = None

    def __post_init__(self):
        if self.max_steps < 1 or self.max_rounds < 1:
            raise ValueError("max_steps and max_rounds must be >= 1")
        for name, tau in (("tau_c", self.tau_c), ("tau_s", self.tau_s)):
            if not 0 < tau < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {tau}")
        if min(self.lambda_cross, self.lambda_self, self.lambda_kl) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.kl_reduction not in ("mean", "sum"):
            raise ValueError(f"kl_reduction must be 'mean' or 'sum', got {self.kl_reduction!r}")

    @property
    def lambdas(self) -> tuple:
        return (self.lambda_cross, self.lambda_self, self.lambda_kl)


@dataclass(frozen=True)
class StepRecord:
    round_index: int
    step: int
    s_cross: float
    s_self: float
    l_kl: float
    l_joint: float
    valid: bool
    mu_mean: float
    mu_std: float
    sigma_mean: float
    sigma_min: float
    sigma_max: float


@dataclass
class RoundTrace:
    round_index: int
    base_seed: int
    status: str
    records: list = field(default_factory=list)
    diagnostic: str | None = None

    @property
    def n_steps(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class PoolEntry:
    noise: Tensor
    score: ScorePair
    round_index: int


@dataclass
class NoisePool:
    entries: list = field(default_factory=list)

    def add(self, entry: PoolEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class OptimizationResult:
    noise: Tensor
    status: str
    score: ScorePair
    rounds: list
    pool: NoisePool
    total_evaluations: int
    wall_clock: float


def compute_scores(backend: DenoiserBackend, prompt: PromptSpec, latent: Tensor, config: OptimizationConfig):
    """Scores of a latent as differentiable 0-dim tensors.

    Runs one denoise step per configured timestep (just t = T by
    default), aggregates and re-weights the attention stacks, smooths
    both maps, and reduces to the two scores.
    """
    timesteps = config.score_timesteps or (prompt.num_denoise_steps,)
    cross_scores, self_scores = [], []
    for t in timesteps:
        result = backend.denoise_step(latent, prompt, t)
        cross = aggregate_cross(result.cross_stack)
        self_map = aggregate_self(result.self_stack)
        cross = reweight_tokens(cross, prompt.target_tokens, config.softmax_temperature)
        cross = smooth_cross(cross, config.smoothing_kernel_size, config.smoothing_sigma)
        self_map = smooth_self(self_map, config.smoothing_kernel_size, config.smoothing_sigma)
        cross_scores.append(cross_attention_response_score(cross, prompt.target_tokens))
        self_scores.append(self_attention_conflict_score(self_map, cross, prompt.target_tokens))
    return torch.stack(cross_scores).mean(), torch.stack(self_scores).mean()


def evaluate_noise(backend: DenoiserBackend, prompt: PromptSpec, noise: Tensor, config: OptimizationConfig) -> ScorePair:
    """Score a noise without tracking gradients."""
    with torch.no_grad():
        s_cross, s_self = compute_scores(backend, prompt, noise, config)
    return evaluate_validity(s_cross.item(), s_self.item(), config.tau_c, config.tau_s)


def _kl_term(dist: NoiseDistribution, config: OptimizationConfig):
    kl = kl_to_standard(dist)
    if config.kl_reduction == "sum":
        kl = kl * dist.mu.numel()
    return kl


@dataclass
class RoundResult:
    status: str
    noise: Tensor
    score: ScorePair | None
    trace: RoundTrace


def optimize_round(
    backend: DenoiserBackend,
    prompt: PromptSpec,
    base: BaseNoise,
    config: OptimizationConfig,
    round_index: int = 0,
) -> RoundResult:
    """One optimization round on a fixed base noise.

    The validity test runs before any update, so a noise that is already
    valid comes back untouched (the fresh (0, 1) distribution makes the
    reparameterization an identity).
    """
    dtype = base.eps.dtype
    mu = torch.zeros_like(base.eps).requires_grad_(True)
    sigma = torch.ones_like(base.eps).requires_grad_(True)
    state = AdamState.init(config.latent_shape, dtype=dtype)
    trace = RoundTrace(round_index=round_index, base_seed=base.seed, status=EXHAUSTED)
    last_pair: ScorePair | None = None

    for step in range(1, config.max_steps + 1):
        latent = mu + sigma * base.eps
        s_cross_t, s_self_t = compute_scores(backend, prompt, latent, config)
        kl_t = _kl_term(NoiseDistribution(mu=mu, sigma=sigma), config)
        joint_t = joint_loss(s_cross_t, s_self_t, kl_t, config.lambdas)

        pair = evaluate_validity(s_cross_t.item(), s_self_t.item(), config.tau_c, config.tau_s)
        last_pair = pair
        with torch.no_grad():
            trace.records.append(
                StepRecord(
                    round_index=round_index,
                    step=step,
                    s_cross=pair.cross_score,
                    s_self=pair.self_score,
                    l_kl=kl_t.item(),
                    l_joint=joint_t.item(),
                    valid=pair.valid,
                    mu_mean=mu.mean().item(),
                    mu_std=mu.std(unbiased=False).item(),
                    sigma_mean=sigma.mean().item(),
                    sigma_min=sigma.min().item(),
                    sigma_max=sigma.max().item(),
                )
            )

        if pair.valid:
            trace.status = VALID
            return RoundResult(status=VALID, noise=latent.detach(), score=pair, trace=trace)

        if not torch.isfinite(joint_t):
            trace.diagnostic = f"non-finite joint loss at step {step}"
            break
        try:
            grads = torch.autograd.grad(joint_t, [mu, sigma], allow_unused=True)
        except RuntimeError as exc:
            trace.diagnostic = f"gradient failure at step {step}: {exc}"
            break
        g_mu = grads[0] if grads[0] is not None else torch.zeros_like(mu)
        g_sigma = grads[1] if grads[1] is not None else torch.zeros_like(sigma)
        try:
            (new_mu, new_sigma), state = adam_update(
                (mu, sigma), (g_mu, g_sigma), state, lr=config.lr, sigma_floor=config.sigma_floor
            )
        except DivergentOptimizationError as exc:
            trace.diagnostic = str(exc)
            break
        mu = new_mu.requires_grad_(True)
        sigma = new_sigma.requires_grad_(True)

    final_noise = (mu + sigma * base.eps).detach()
    return RoundResult(status=EXHAUSTED, noise=final_noise, score=last_pair, trace=trace)


def select_from_pool(pool: NoisePool) -> PoolEntry:
    """Entry minimizing cross + self; ties keep the earliest round."""
    if not pool.entries:
        raise ValueError("noise pool is empty")
    best = pool.entries[0]
    for entry in pool.entries[1:]:
        if entry.score.total < best.score.total:
            best = entry
    return best


def optimize_initial_noise(
    backend: DenoiserBackend,
    prompt: PromptSpec,
    config: OptimizationConfig,
) -> OptimizationResult:
    """Full multi-round search for a valid initial noise.

    Every round draws a fresh base noise from a seed derived from
    ``config.seed`` and the round index, so runs replay exactly. A valid
    round short-circuits; otherwise the pool argmin is returned.
    """
    started = time.perf_counter()
    pool = NoisePool()
    rounds = []
    n_timesteps = len(config.score_timesteps or (None,))
    for r in range(config.max_rounds):
        base = sample_standard(
            config.latent_shape, derive_seed(config.seed, "round", r), dtype=torch.float64
        )
        result = optimize_round(backend, prompt, base, config, round_index=r)
        rounds.append(result.trace)
        if result.status == VALID:
            return OptimizationResult(
                noise=result.noise,
                status=VALID,
                score=result.score,
                rounds=rounds,
                pool=pool,
                total_evaluations=sum(t.n_steps for t in rounds) * n_timesteps,
                wall_clock=time.perf_counter() - started,
            )
        if result.score is not None:
            pool.add(PoolEntry(noise=result.noise, score=result.score, round_index=r))
    best = select_from_pool(pool)
    return OptimizationResult(
        noise=best.noise,
        status=POOL_FALLBACK,
        score=best.score,
        rounds=rounds,
        pool=pool,
        total_evaluations=sum(t.n_steps for t in rounds) * n_timesteps,
        wall_clock=time.perf_counter() - started,
    )


@dataclass
class PartitionReport:
    """Raw-vs-optimized validity over a batch of seeds."""

    n_seeds: int
    seeds: list
    raw_pairs: list
    optimized: bool
    post_pairs: list | None = None
    post_statuses: list | None = None

    @property
    def raw_valid_fraction(self) -> float:
        return sum(p.valid for p in self.raw_pairs) / len(self.raw_pairs)

    @property
    def post_valid_fraction(self) -> float | None:
        if self.post_pairs is None:
            return None
        return sum(p.valid for p in self.post_pairs) / len(self.post_pairs)


def _partition_single(args) -> tuple:
    backend, prompt, config, seed, optimize = args
    run_config = replace(config, seed=seed)
    if optimize:
        result = optimize_initial_noise(backend, prompt, run_config)
        first = result.rounds[0].records[0]
        raw = evaluate_validity(first.s_cross, first.s_self, config.tau_c, config.tau_s)
        post = evaluate_noise(backend, prompt, result.noise, config)
        return raw, post, result.status
    base = sample_standard(config.latent_shape, derive_seed(seed, "round", 0), dtype=torch.float64)
    raw = evaluate_noise(backend, prompt, base.eps, config)
    return raw, None, None


def partition_experiment(
    backend: DenoiserBackend,
    prompt: PromptSpec,
    n_seeds: int,
    config: OptimizationConfig,
    optimize: bool = False,
    workers: int = 1,
) -> PartitionReport:
    """Score ``n_seeds`` fresh noises, optionally after optimization.

    Without optimization each seed costs one evaluation. With it, the raw
    score is read from the first step of the first round, so the raw and
    optimized verdicts are paired on the same draw.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seeds = [derive_seed(config.seed, "partition", i) for i in range(n_seeds)]
    tasks = [(backend, prompt, config, s, optimize) for s in seeds]
    if workers > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_partition_single, tasks))
    else:
        outcomes = [_partition_single(t) for t in tasks]
    raw_pairs = [o[0] for o in outcomes]
    if optimize:
        return PartitionReport(
            n_seeds=n_seeds,
            seeds=seeds,
            raw_pairs=raw_pairs,
            optimized=True,
            post_pairs=[o[1] for o in outcomes],
            post_statuses=[o[2] for o in outcomes],
        )
    return PartitionReport(n_seeds=n_seeds, seeds=seeds, raw_pairs=raw_pairs, optimized=False)
