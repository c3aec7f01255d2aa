"""Gaussian diffusion: noise schedule, forward corruption, guided reverse sampling.

Timestep convention: index 0 is clean data, 1..T are noise levels, and
alpha_bar(0) == 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables, each of length ``T`` (entry ``t - 1`` holds step ``t``)."""

    T: int
    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor
    beta_start: float
    beta_end: float
    kind: str = "linear"

    def beta(self, t: int) -> float:
        _check_t(t, self.T)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        _check_t(t, self.T)
        return float(self.alpha_bars[t - 1])

    def padded_alpha_bars(self) -> Tensor:
        """``alpha_bars`` with a leading 1.0, indexable directly by timestep."""
        return torch.cat([self.alpha_bars.new_ones(1), self.alpha_bars])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "schedule_kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("schedule_kind", "linear") != "linear":
            raise ValueError(f"unknown schedule kind {d['schedule_kind']!r}")
        return build_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, 0),
                         beta_start=beta_start, beta_end=beta_end)


def _check_t(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside [1, {T}]")


def _coef(values: Tensor, t: int | Tensor, ref: Tensor) -> Tensor | float:
    """Look up per-step coefficients, broadcasting over the batch when ``t`` is a tensor."""
    if isinstance(t, Tensor) and t.ndim > 0:
        if t.min() < 0 or t.max() >= values.numel():
            raise ValueError("timestep outside schedule")
        c = values.to(ref.device)[t.long()].to(ref.dtype)
        return c.view(-1, *([1] * (ref.ndim - 1)))
    return float(values[int(t)])


def forward_sample(x0: Tensor, t: int | Tensor, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Closed-form draw of ``x_t`` given ``x0`` and the noise ``eps``.

    ``t`` may be an int or a per-sample LongTensor of shape (B,).
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if not isinstance(t, Tensor) or t.ndim == 0:
        _check_t(int(t), s.T)
    ab = s.padded_alpha_bars()
    a = _coef(ab.sqrt(), t, x0)
    b = _coef((1.0 - ab).sqrt(), t, x0)
    return a * x0 + b * eps


def forward_step(x_prev: Tensor, t: int, s: NoiseSchedule, rng: torch.Generator) -> Tensor:
    """One Markov corruption step q(x_t | x_{t-1})."""
    beta = s.beta(t)
    z = torch.randn(x_prev.shape, generator=rng, dtype=x_prev.dtype)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * z


def predict_x0(x_t: Tensor, eps_hat: Tensor, t: int | Tensor, s: NoiseSchedule,
               clamp: bool = True) -> Tensor:
    """Invert the closed-form marginal; clamped to [-1, 1] unless ``clamp=False``."""
    if not isinstance(t, Tensor) or t.ndim == 0:
        _check_t(int(t), s.T)
    ab = s.padded_alpha_bars()
    x0 = (x_t - _coef((1.0 - ab).sqrt(), t, x_t) * eps_hat) / _coef(ab.sqrt(), t, x_t)
    return x0.clamp(-1.0, 1.0) if clamp else x0


def guided_noise(eps_cond: Tensor, eps_uncond: Tensor, w: float) -> Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    if w == 0:
        return eps_cond
    return (1.0 + w) * eps_cond - w * eps_uncond


def posterior_mean(x_t: Tensor, eps: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    beta = s.beta(t)
    return (x_t - (beta / math.sqrt(1.0 - s.alpha_bar(t))) * eps) / math.sqrt(1.0 - beta)


def clip_noise(x_t: Tensor, eps: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    """Noise estimate consistent with the clamped x0 prediction.

    Unchanged wherever predict_x0 already lies in [-1, 1]; elsewhere it stops
    out-of-range x0 estimates from compounding over the reverse chain.
    """
    x0 = predict_x0(x_t, eps, t, s)
    return (x_t - math.sqrt(s.alpha_bar(t)) * x0) / math.sqrt(1.0 - s.alpha_bar(t))


def reverse_step(x_t: Tensor, eps_guided: Tensor, t: int, s: NoiseSchedule,
                 rng: torch.Generator) -> Tensor:
    """Ancestral step x_t -> x_{t-1} with fixed variance beta_t; noiseless at t = 1."""
    mean = posterior_mean(x_t, eps_guided, t, s)
    if t == 1:
        return mean
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + math.sqrt(s.beta(t)) * z


Denoiser = Callable[[Tensor, Tensor, object], Tensor]


@torch.no_grad()
def sample(denoiser: Denoiser, cond, w: float, s: NoiseSchedule, rng: torch.Generator,
           shape: tuple[int, ...], progress: Callable[[int], None] | None = None,
           clip_x0: bool = True) -> Tensor:
    """Classifier-free guided ancestral sampling from pure noise.

    ``denoiser(x_t, t, cond)`` must also accept ``cond.null()``, the all-NULL
    condition of the same batch size. With ``w == 0`` the unconditional branch
    is skipped since it carries zero weight. ``clip_x0`` replaces the guided
    noise by :func:`clip_noise` before each step.
    """
    x = torch.randn(shape, generator=rng)
    null = cond.null() if w != 0 else None
    for t in range(s.T, 0, -1):
        tt = torch.full((shape[0],), t, dtype=torch.long)
        eps_c = denoiser(x, tt, cond)
        eps = guided_noise(eps_c, denoiser(x, tt, null), w) if w != 0 else eps_c
        if clip_x0:
            eps = clip_noise(x, eps, t, s)
        x = reverse_step(x, eps, t, s, rng)
        if progress is not None:
            progress(t)
    return x.clamp(-1.0, 1.0)
