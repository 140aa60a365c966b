"""Variational diffusion prior over pseudoinputs.

Variance-preserving forward process ``q(y_t|u) = N(α_t u, (1-α_t²) I)`` with
log-SNR linear in ``t`` and an ε-predicting reverse chain on a uniform grid of
``T`` steps. Loss terms follow the usual naming: ``L0`` is the negative
reconstruction log-density, ``L1`` the prior KL at ``t=1`` and ``LT`` the sum
of per-step KLs, so ``L_vlb = -(L0 + L1 + LT)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

from .distributions import DiagGaussian, per_datapoint
from .layers import ResBlock, sinusoidal_embedding
from .tensor_core import Rng, UsageError

Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 50
    logsnr_min: float = -6.0
    logsnr_max: float = 7.0

    def __post_init__(self):
        if self.T < 1:
            raise UsageError("T must be >= 1")
        if not self.logsnr_max > self.logsnr_min:
            raise UsageError("logsnr_max must exceed logsnr_min")

    def logsnr(self, t):
        t = torch.as_tensor(t, dtype=torch.float64)
        return self.logsnr_max + t * (self.logsnr_min - self.logsnr_max)

    def alpha2(self, t):
        return torch.sigmoid(self.logsnr(t))

    def sigma2(self, t):
        return torch.sigmoid(-self.logsnr(t))

    def alpha(self, t):
        return torch.sqrt(self.alpha2(t))

    def sigma(self, t):
        return torch.sqrt(self.sigma2(t))

    def snr(self, t):
        return torch.exp(self.logsnr(t))


def _check_t(t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float64)
    if bool(((t < 0) | (t > 1)).any()):
        raise UsageError(f"diffusion time must lie in [0, 1], got {t}")
    return t


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Per-sample schedule values broadcast against ``[n, ...]`` tensors."""
    v = v.to(dtype=like.dtype, device=like.device)
    if v.dim() == 0:
        return v
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def q_sample(
    sched: DiffusionSchedule, u: torch.Tensor, t, rng: Rng, eps: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    t = _check_t(t)
    if eps is None:
        eps = rng.normal_like(u)
    y = _bcast(sched.alpha(t), u) * u + _bcast(sched.sigma(t), u) * eps
    return y, eps


def forward_posterior_from_alphas(y_t, u, alpha_t, alpha_s) -> DiagGaussian:
    """``q(y_s | y_t, u)`` written directly in terms of ``α_t`` and ``α_s``."""
    a_t2, a_s2 = alpha_t**2, alpha_s**2
    coef_y = alpha_t * (1 - a_s2) / (alpha_s * (1 - a_t2))
    coef_u = (a_s2 - a_t2) / ((1 - a_t2) * alpha_s)
    var = (a_s2 - a_t2) / a_s2 * (1 - a_s2) / (1 - a_t2)
    mu = coef_y * y_t + coef_u * u
    var = torch.as_tensor(var, dtype=mu.dtype) * torch.ones_like(mu)
    return DiagGaussian(mu, torch.log(var), clamp=False)


def _posterior_coefs(sched: DiffusionSchedule, t, s):
    """Numerically stable ``(coef_y, coef_u, var)`` using log-SNR differences."""
    lt, ls = sched.logsnr(t), sched.logsnr(s)
    one_minus_ratio = -torch.expm1(lt - ls)  # 1 - SNR_t/SNR_s
    a_t, a_s = sched.alpha(t), sched.alpha(s)
    s2_t, s2_s = sched.sigma2(t), sched.sigma2(s)
    coef_y = (a_t / a_s) * (s2_s / s2_t)
    coef_u = a_s * one_minus_ratio
    var = one_minus_ratio * s2_s
    return coef_y, coef_u, var


def forward_posterior(sched: DiffusionSchedule, y_t, u, t, s) -> DiagGaussian:
    t, s = _check_t(t), _check_t(s)
    if bool((s >= t).any()):
        raise UsageError("forward_posterior requires s < t")
    coef_y, coef_u, var = _posterior_coefs(sched, t, s)
    mu = _bcast(coef_y, y_t) * y_t + _bcast(coef_u, y_t) * u
    logvar = torch.log(_bcast(var, y_t)) * torch.ones_like(mu)
    return DiagGaussian(mu, logvar, clamp=False)


def predict_u(sched: DiffusionSchedule, y_t, t, eps_hat) -> torch.Tensor:
    return (y_t - _bcast(sched.sigma(t), y_t) * eps_hat) / _bcast(sched.alpha(t), y_t)


def reverse_transition(sched: DiffusionSchedule, y_t, t, s, net: Denoiser) -> DiagGaussian:
    t = _check_t(t)
    t_vec = t.expand(y_t.shape[0]) if t.dim() == 0 else t
    eps_hat = net(y_t, t_vec.to(y_t))
    return forward_posterior(sched, y_t, predict_u(sched, y_t, t, eps_hat), t, s)


def likelihood_term(sched: DiffusionSchedule, u: torch.Tensor, y0: torch.Tensor) -> torch.Tensor:
    """Per-datapoint ``log N(u | y0/α0, σ0²/α0² I)``."""
    a0, s0 = sched.alpha(0.0), sched.sigma(0.0)
    var = float(s0**2 / a0**2)
    resid = u - y0 / float(a0)
    return per_datapoint(-0.5 * (math.log(2 * math.pi * var) + resid**2 / var))


def prior_kl(sched: DiffusionSchedule, u: torch.Tensor) -> torch.Tensor:
    """Per-datapoint ``KL(q(y_1|u) || N(0, I))``."""
    a2, s2 = float(sched.alpha2(1.0)), float(sched.sigma2(1.0))
    return per_datapoint(0.5 * (a2 * u**2 + s2 - 1.0 - math.log(s2)))


@dataclass
class DiffusionTerms:
    L0: torch.Tensor  # per datapoint
    L1: torch.Tensor
    LT: torch.Tensor

    @property
    def vlb(self) -> torch.Tensor:
        return -(self.L0 + self.L1 + self.LT)


def diffusion_step_kl(sched: DiffusionSchedule, u, i, net: Denoiser, rng: Rng) -> torch.Tensor:
    """One-sample estimate of ``KL(q(y_s|y_t,u) || r(y_s|y_t))`` for step ``i`` (per datapoint).

    With a shared variance the KL reduces to ``½ (SNR_s - SNR_t) ||u - û||²``.
    """
    i = torch.as_tensor(i, dtype=torch.float64)
    t, s = i / sched.T, (i - 1) / sched.T
    y_t, _ = q_sample(sched, u, t, rng)
    t_vec = t.expand(u.shape[0]) if t.dim() == 0 else t
    u_hat = predict_u(sched, y_t, t, net(y_t, t_vec.to(u)))
    weight = (sched.snr(s) - sched.snr(t)).to(u)  # scalar or [n]
    return 0.5 * weight * per_datapoint((u - u_hat) ** 2)


def l_vlb(
    sched: DiffusionSchedule,
    u: torch.Tensor,
    net: Denoiser,
    rng: Rng,
    mode: Literal["full", "stochastic"] = "stochastic",
) -> DiffusionTerms:
    """Diffusion bound terms for a batch ``u`` of shape ``[n, ...]``."""
    n = u.shape[0]
    y0, _ = q_sample(sched, u, 0.0, rng)
    L0 = -likelihood_term(sched, u, y0)
    L1 = prior_kl(sched, u)
    if mode == "full":
        LT = torch.zeros(n, dtype=u.dtype, device=u.device)
        for i in range(1, sched.T + 1):
            LT = LT + diffusion_step_kl(sched, u, i, net, rng)
    elif mode == "stochastic":
        i = torch.as_tensor(rng.integers(1, sched.T + 1, size=n), dtype=torch.float64)
        LT = sched.T * diffusion_step_kl(sched, u, i, net, rng)
    else:
        raise UsageError(f"unknown l_vlb mode {mode!r}")
    return DiffusionTerms(L0, L1, LT)


@torch.no_grad()
def sample_prior(
    sched: DiffusionSchedule,
    n: int,
    shape: tuple[int, ...],
    net: Denoiser,
    rng: Rng,
    T: int | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from ``N(0, I)`` at ``t=1`` down to ``t=0``, returning ``y0/α0``."""
    T = sched.T if T is None else T
    y = rng.normal((n, *shape), dtype=dtype)
    for i in range(T, 0, -1):
        g = reverse_transition(sched, y, i / T, (i - 1) / T, net)
        y = g.mu + g.std * rng.normal_like(y)
    return y / float(sched.alpha(0.0))


class EpsNet(nn.Module):
    """Small residual ε-predictor with a sinusoidal time embedding in every block."""

    def __init__(self, channels: int = 1, hidden: int = 16, n_blocks: int = 2, emb_dim: int = 16):
        super().__init__()
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(channels, hidden, 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(hidden, hidden, emb_dim=emb_dim) for _ in range(n_blocks)])
        self.conv_out = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(sinusoidal_embedding(t.to(y.dtype), self.emb_dim))
        h = self.conv_in(y)
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(F.silu(h))
