"""Diffusion machinery shared by both stages.

Variance-preserving cosine schedule, forward noising, the noise-
regression training objective, a deterministic DDIM-style ancestral
sampler, and a finite-difference gradient checker used to validate every
trainable loss in the package.

Denoisers are plain callables `denoiser(z_t, t, cond) -> eps_hat` over
`LatentSequence`s; parameters live inside the callable (usually a torch
module) so autograd sees them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .errors import ConfigError, NumericError, ShapeError
from .seeding import derive_seed, torch_gen

__all__ = [
    "Schedule",
    "LatentSequence",
    "NoiseDraw",
    "make_schedule",
    "draw_noise",
    "forward_noise",
    "training_loss",
    "sample_loop",
    "grad_check",
]

# schedules keep alpha >= this so the x0-form DDIM update stays finite
ALPHA_FLOOR = 1e-4
# predicted clean latents are clamped into this band inside the sampler;
# latents are normalized to roughly unit scale, so the bound never binds
# for a trained model but stops error blow-up at the high-noise end
Z0_CLAMP = 4.0


@dataclass
class LatentSequence:
    """Per-frame latent grids (N, C, h, w) flowing through the stages."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"latent sequence must be (N, C, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise NumericError("latent sequence contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class NoiseDraw:
    """Reproducible standard-normal draw: same (seed, shape) -> same values."""

    data: torch.Tensor
    seed: int


def draw_noise(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> NoiseDraw:
    g = torch_gen(seed)
    return NoiseDraw(data=torch.randn(tuple(shape), generator=g, dtype=dtype), seed=seed)


@dataclass(frozen=True)
class Schedule:
    """Variance-preserving schedule: alpha_t^2 + sigma_t^2 = 1 for all t."""

    T: int
    alpha: torch.Tensor  # (T+1,) float64, strictly decreasing, alpha_0 = 1
    sigma: torch.Tensor  # (T+1,) float64, strictly increasing, sigma_0 = 0
    loss_weight: Callable[[int], float] = field(default=lambda t: 1.0)


def make_schedule(T: int) -> Schedule:
    """Cosine signal scale alpha_t = cos(pi/2 * t/T), floored at 1e-4."""
    if not isinstance(T, int) or T < 1:
        raise ConfigError(f"schedule length T must be a positive integer, got {T}")
    if T > 10_000:
        # the 1e-4 floor would flatten the tail and break strict monotonicity
        raise ConfigError(f"schedule length T must be <= 10000, got {T}")
    t = torch.arange(T + 1, dtype=torch.float64)
    alpha = torch.clamp(torch.cos(0.5 * math.pi * t / T), min=ALPHA_FLOOR, max=1.0)
    sigma = torch.sqrt(1.0 - alpha**2)
    return Schedule(T=T, alpha=alpha, sigma=sigma)


def forward_noise(z0: LatentSequence, t: int, eps: NoiseDraw, schedule: Schedule) -> LatentSequence:
    """Noised latent alpha_t * z0 + sigma_t * eps."""
    if eps.data.shape != z0.data.shape:
        raise ShapeError(
            f"noise shape {tuple(eps.data.shape)} != latent shape {tuple(z0.data.shape)}"
        )
    if not 0 <= t <= schedule.T:
        raise ConfigError(f"timestep {t} outside [0, {schedule.T}]")
    a = schedule.alpha[t].to(z0.data.dtype)
    s = schedule.sigma[t].to(z0.data.dtype)
    return LatentSequence(a * z0.data + s * eps.data.to(z0.data.dtype))


def training_loss(
    denoiser: Callable,
    batch: Sequence[tuple[LatentSequence, object]],
    schedule: Schedule,
    seed: int,
) -> torch.Tensor:
    """Noise-regression objective: mean of w(t) * (eps_hat - eps)^2.

    Timesteps are drawn uniformly from {1..T} and noise from a seeded
    standard normal, one draw per batch element, so the loss value is a
    deterministic function of (parameters, batch, seed).
    """
    if len(batch) == 0:
        raise ConfigError("training batch must be non-empty")
    g = torch_gen(seed, "training-loss")
    total = None
    for z0, cond in batch:
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=g).item())
        eps = torch.randn(z0.data.shape, generator=g, dtype=z0.data.dtype)
        z_t = LatentSequence(
            schedule.alpha[t].to(z0.data.dtype) * z0.data
            + schedule.sigma[t].to(z0.data.dtype) * eps
        )
        eps_hat = denoiser(z_t, t, cond)
        if not torch.isfinite(eps_hat.data).all():
            raise NumericError(f"denoiser output non-finite at t={t}")
        w = float(schedule.loss_weight(t))
        term = (w * (eps_hat.data - eps) ** 2).mean()
        total = term if total is None else total + term
    loss = total / len(batch)
    if not torch.isfinite(loss):
        raise NumericError("training loss is non-finite")
    return loss


def _substeps(T: int, steps: int) -> list[int]:
    """Uniformly strided anchors t_0 > t_1 > ... > t_steps = 0.

    The top anchor is T*steps/(steps+1), not T itself: the schedule's
    terminal alpha sits at the clamp floor, where the x0-form update would
    amplify model error by 1/alpha ~ 1e4. Skipping it costs a marginal
    mismatch of alpha_top * z0 (under 0.1 for steps >= 20) against the
    standard-normal start. One denoiser evaluation happens per stride.
    """
    if steps == T:  # degenerate full-granularity request
        return list(range(T, -1, -1))
    ts = [round(T * (steps - k) / (steps + 1)) for k in range(steps + 1)]
    if len(set(ts)) != len(ts):
        raise ConfigError(f"stride produced duplicate timesteps for steps={steps}, T={T}")
    return ts


def sample_loop(
    denoiser: Callable,
    cond: object,
    schedule: Schedule,
    steps: int,
    seed: int,
    shape: Sequence[int],
    dtype: torch.dtype = torch.float32,
) -> LatentSequence:
    """Deterministic DDIM sampling from a seeded standard-normal latent.

    Each update predicts the clean latent from the noise estimate and
    re-noises it at the next (lower) timestep; the final step lands on
    t=0, returning the clean prediction itself.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if steps > schedule.T:
        raise ConfigError(f"steps ({steps}) cannot exceed schedule T ({schedule.T})")
    ts = _substeps(schedule.T, steps)
    g = torch_gen(seed, "sample-init")
    z = torch.randn(tuple(shape), generator=g, dtype=dtype)
    for t_hi, t_lo in zip(ts[:-1], ts[1:]):
        eps_hat = denoiser(LatentSequence(z), t_hi, cond).data
        a_hi = schedule.alpha[t_hi].to(dtype)
        s_hi = schedule.sigma[t_hi].to(dtype)
        a_lo = schedule.alpha[t_lo].to(dtype)
        s_lo = schedule.sigma[t_lo].to(dtype)
        z0_hat = torch.clamp((z - s_hi * eps_hat) / a_hi, -Z0_CLAMP, Z0_CLAMP)
        z = a_lo * z0_hat + s_lo * eps_hat
    return LatentSequence(z)


def grad_check(
    scalar_fn: Callable[[], torch.Tensor],
    parameters: Sequence[torch.Tensor],
    n_probes: int = 20,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Max relative error between autograd and central finite differences.

    Probes n random parameter coordinates; the step adapts to each
    coordinate's magnitude. Relative error uses a small absolute floor in
    the denominator so near-zero gradients are compared at the finite-
    difference noise level instead of blowing up.
    """
    params = [p for p in parameters]
    for p in params:
        if not p.requires_grad:
            raise ConfigError("all checked parameters must require grad")
    loss = scalar_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    g = torch_gen(seed, "grad-check")
    coords = torch.randint(0, total, (n_probes,), generator=g)

    worst = 0.0
    for flat_idx in coords.tolist():
        pi = 0
        while flat_idx >= sizes[pi]:
            flat_idx -= sizes[pi]
            pi += 1
        p = params[pi]
        orig = p.data.view(-1)[flat_idx].item()
        h = step * max(1.0, abs(orig))
        with torch.no_grad():
            p.data.view(-1)[flat_idx] = orig + h
            f_plus = scalar_fn().item()
            p.data.view(-1)[flat_idx] = orig - h
            f_minus = scalar_fn().item()
            p.data.view(-1)[flat_idx] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = grads[pi].view(-1)[flat_idx].item()
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst
