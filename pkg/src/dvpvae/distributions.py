"""Diagonal Gaussians and the Bernoulli pixel likelihood."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .tensor_core import DimensionError, Rng, UsageError

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2 * math.pi)


class DiagGaussian:
    """Gaussian with independent coordinates, stored as mean and clamped log-variance."""

    def __init__(self, mu: torch.Tensor, logvar: torch.Tensor, clamp: bool = True):
        if mu.shape != logvar.shape:
            raise DimensionError(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} differ")
        self.mu = mu
        # diffusion transitions need exact tiny variances, so they opt out
        self.logvar = torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX) if clamp else logvar

    @property
    def shape(self):
        return self.mu.shape

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Elementwise log-density."""
        return -0.5 * (LOG_2PI + self.logvar + (x - self.mu) ** 2 * torch.exp(-self.logvar))


def rsample(
    g: DiagGaussian, temperature: float, rng: Rng, eps: torch.Tensor | None = None
) -> torch.Tensor:
    if temperature < 0:
        raise UsageError("temperature must be non-negative")
    if temperature == 0:
        return g.mu
    if eps is None:
        eps = rng.normal_like(g.mu)
    return g.mu + temperature * g.std * eps


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """Elementwise ``KL(q || p)``; sum with :func:`per_datapoint`."""
    if q.shape != p.shape:
        raise DimensionError(f"KL: shapes {tuple(q.shape)} and {tuple(p.shape)} differ")
    return 0.5 * (
        torch.exp(q.logvar - p.logvar)
        + (q.mu - p.mu) ** 2 * torch.exp(-p.logvar)
        - 1.0
        + p.logvar
        - q.logvar
    )


def per_datapoint(t: torch.Tensor) -> torch.Tensor:
    """Sum over every axis except the leading batch axis."""
    return t.reshape(t.shape[0], -1).sum(dim=1)


def gaussian_entropy(log_sigma, P: int):
    """Entropy of ``N(m, σ² I_P)``: ``(P/2) ln(2πe σ²)``."""
    if P < 1:
        raise UsageError("P must be >= 1")
    return 0.5 * P * (LOG_2PI + 1.0) + P * log_sigma


class BernoulliLikelihood:
    def __init__(self, logits: torch.Tensor):
        self.logits = logits

    @property
    def mean(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    def sample(self, rng: Rng) -> torch.Tensor:
        p = self.mean.detach().cpu().double().numpy()
        return torch.from_numpy(rng.bernoulli(p)).to(self.logits)


def bernoulli_log_prob(lik: BernoulliLikelihood, x: torch.Tensor) -> torch.Tensor:
    """Per-datapoint ``log p(x)`` in softplus form, summed over pixels."""
    if x.shape != lik.logits.shape:
        raise DimensionError(f"x {tuple(x.shape)} vs logits {tuple(lik.logits.shape)}")
    if not bool(((x == 0) | (x == 1)).all()):
        raise UsageError("bernoulli_log_prob expects binary x")
    ll = -F.binary_cross_entropy_with_logits(lik.logits, x.to(lik.logits), reduction="none")
    return per_datapoint(ll) if ll.dim() > 1 else ll.sum()
