"""Orthonormal type-II DCT pseudoinputs.

``f_dct`` maps an image to a cropped, normalized frequency-domain pseudoinput
and ``f_dct_dagger`` lifts it back to image space. Everything acts on the
last two axes, so leading batch/channel axes pass through.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np
import torch

from .tensor_core import DimensionError, Rng, UsageError

LOG_SIGMA_MIN = -10.0
ZERO_MAX_EPS = 1e-8


@dataclass(frozen=True)
class DctBasis:
    D: int
    C: np.ndarray  # D×D, rows are frequencies

    @classmethod
    def build(cls, D: int) -> "DctBasis":
        return cls(D, _basis(D))

    def tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.as_tensor(self.C, dtype=dtype, device=device)


@lru_cache(maxsize=None)
def _basis(D: int) -> np.ndarray:
    k = np.arange(D)[:, None]
    n = np.arange(D)[None, :]
    C = math.sqrt(2.0 / D) * np.cos(np.pi / D * (n + 0.5) * k)
    C[0, :] = math.sqrt(1.0 / D)
    return C


def _c(D: int, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(_basis(D), dtype=like.dtype, device=like.device)


def _check_square(x: torch.Tensor, op: str) -> int:
    if x.dim() < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"{op} needs square trailing axes, got {tuple(x.shape)}")
    return x.shape[-1]


def dct2(x: torch.Tensor) -> torch.Tensor:
    """``C x Cᵀ`` over the last two axes."""
    C = _c(_check_square(x, "dct2"), x)
    return C @ x @ C.T


def idct2(y: torch.Tensor) -> torch.Tensor:
    """``Cᵀ y C`` over the last two axes; exact inverse of :func:`dct2`."""
    C = _c(_check_square(y, "idct2"), y)
    return C.T @ y @ C


@dataclass(frozen=True)
class NormMatrix:
    S: torch.Tensor  # c×d×d, strictly positive
    d: int
    digest: str = ""

    def as_(self, like: torch.Tensor) -> torch.Tensor:
        return self.S.to(dtype=like.dtype, device=like.device)


def compute_norm_matrix(dataset: Iterable, d: int, digest: str = "") -> NormMatrix:
    """Per-frequency maximum of ``|DCT(x)|`` over the top-left ``d×d`` block.

    ``dataset`` yields ``c×D×D`` images (or ``n×c×D×D`` batches). Maxima
    below 1e-8 are replaced by 1 so the normalization is always defined.
    """
    S = None
    for x in dataset:
        x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float64)
        D = _check_square(x, "compute_norm_matrix")
        if d > D:
            raise UsageError(f"crop size d={d} exceeds image side D={D}")
        coef = dct2(x)[..., :d, :d].abs()
        if coef.dim() == 4:
            coef = coef.amax(dim=0)
        S = coef if S is None else torch.maximum(S, coef)
    if S is None:
        raise UsageError("compute_norm_matrix: empty dataset")
    S = torch.where(S < ZERO_MAX_EPS, torch.ones_like(S), S)
    return NormMatrix(S, d, digest)


def f_dct(x: torch.Tensor, S: NormMatrix | torch.Tensor, d: int | None = None) -> torch.Tensor:
    S_t = S.as_(x) if isinstance(S, NormMatrix) else S.to(x)
    d = S_t.shape[-1] if d is None else d
    D = _check_square(x, "f_dct")
    if d > D:
        raise UsageError(f"crop size d={d} exceeds image side D={D}")
    return dct2(x)[..., :d, :d] / S_t


def f_dct_dagger(u: torch.Tensor, S: NormMatrix | torch.Tensor, D: int) -> torch.Tensor:
    S_t = S.as_(u) if isinstance(S, NormMatrix) else S.to(u)
    d = _check_square(u, "f_dct_dagger")
    if d > D:
        raise UsageError(f"crop size d={d} exceeds image side D={D}")
    # zero-padding then idct2 is Cᵀ[:, :d] (u S) C[:d, :]
    C = _c(D, u)[:d, :]
    return C.T @ (u * S_t) @ C


@dataclass
class PseudoinputPair:
    u: torch.Tensor
    u_x: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(clamp_log_sigma(self.log_sigma))


def clamp_log_sigma(log_sigma: torch.Tensor) -> torch.Tensor:
    return torch.clamp(log_sigma, min=LOG_SIGMA_MIN)


def sample_pseudoinput(
    x: torch.Tensor,
    S: NormMatrix,
    d: int,
    log_sigma: torch.Tensor,
    rng: Rng,
    eps: torch.Tensor | None = None,
) -> PseudoinputPair:
    """Reparameterized draw from ``N(f_dct(x), σ² I)`` plus its image-space lift."""
    if not torch.isfinite(torch.as_tensor(log_sigma)).all():
        raise UsageError("log_sigma must be finite")
    mean = f_dct(x, S, d)
    if eps is None:
        eps = rng.normal_like(mean)
    sigma = torch.exp(clamp_log_sigma(log_sigma)).to(mean)
    u = mean + sigma * eps
    return PseudoinputPair(u, f_dct_dagger(u, S, x.shape[-1]), log_sigma)


def dataset_digest(images: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(images.shape).encode())
    h.update(np.ascontiguousarray(images).tobytes())
    return h.hexdigest()[:16]
