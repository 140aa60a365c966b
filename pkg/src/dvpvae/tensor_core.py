"""Differentiable array kernels and the shared random number service.

Arrays are ``torch.Tensor`` objects; reverse-mode differentiation is torch
autograd. The functions here pin the exact shape contracts the model relies
on and raise :class:`DimensionError` instead of silently broadcasting.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


class UsageError(ValueError):
    """Raised when an operation is called outside its preconditions."""


def _shape(t: torch.Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {_shape(a)} vs {_shape(b)}")


# ---------------------------------------------------------------------------
# kernels


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {_shape(a)} and {_shape(b)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ ({a.shape[1]} vs {b.shape[0]})")
    return a @ b


def conv2d(
    x: torch.Tensor,
    k: torch.Tensor,
    bias: torch.Tensor | None = None,
    pad: int | None = None,
) -> torch.Tensor:
    """Zero-padded cross-correlation, stride 1.

    ``x`` is ``c_in×h×w`` or batched ``n×c_in×h×w``; ``k`` is
    ``c_out×c_in×kh×kw`` with odd spatial size. The default padding keeps the
    spatial extent.
    """
    if k.dim() != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got {_shape(k)}")
    kh, kw = k.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel spatial size must be odd, got {kh}x{kw}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {_shape(x)}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    if pad is None:
        pad = kh // 2
    out = F.conv2d(x, k, bias, padding=pad)
    return out[0] if unbatched else out


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "mul")
    return a * b


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def sum(x: torch.Tensor, dims: Sequence[int] | None = None) -> torch.Tensor:  # noqa: A001
    return x.sum() if dims is None else x.sum(dim=tuple(dims))


def mean(x: torch.Tensor, dims: Sequence[int] | None = None) -> torch.Tensor:
    return x.mean() if dims is None else x.mean(dim=tuple(dims))


def clamp(x: torch.Tensor, lo: float | None = None, hi: float | None = None) -> torch.Tensor:
    return torch.clamp(x, min=lo, max=hi)


def avg_pool2d(x: torch.Tensor, s: int) -> torch.Tensor:
    """Average over non-overlapping ``s×s`` windows of the last two axes."""
    h, w = x.shape[-2:]
    if h % s or w % s:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by stride {s}")
    if s == 1:
        return x
    return F.avg_pool2d(x, s)


def nearest_upsample(x: torch.Tensor, s: int) -> torch.Tensor:
    if s == 1:
        return x
    return x.repeat_interleave(s, dim=-2).repeat_interleave(s, dim=-1)


def concat(tensors: Sequence[torch.Tensor], axis: int = -3) -> torch.Tensor:
    """Concatenate along the channel axis (``-3`` for ``[n,]c,h,w`` layouts)."""
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim():
            raise DimensionError("concat: rank mismatch")
        for i in range(ref.dim()):
            if i == axis % ref.dim():
                continue
            if t.shape[i] != ref.shape[i]:
                raise DimensionError(f"concat: extents differ off-axis {_shape(ref)} vs {_shape(t)}")
    return torch.cat(list(tensors), dim=axis)


def resize_to(x: torch.Tensor, side: int) -> torch.Tensor:
    """Average-pool down or nearest-upsample to a square ``side``."""
    cur = x.shape[-1]
    if cur == side:
        return x
    if cur > side:
        if cur % side:
            raise DimensionError(f"cannot pool {cur} down to {side}")
        return avg_pool2d(x, cur // side)
    if side % cur:
        raise DimensionError(f"cannot upsample {cur} to {side}")
    return nearest_upsample(x, side // cur)


def backward(root: torch.Tensor, retain_graph: bool = True) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``root``.

    Gradients accumulate across calls until the caller zeroes them.
    """
    if root.dim() != 0:
        raise UsageError(f"backward needs a scalar root, got shape {_shape(root)}")
    root.backward(retain_graph=retain_graph)


def finite_difference_grad(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-4
) -> torch.Tensor:
    """Central-difference gradient of a scalar function (evaluated without autograd)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(x))
            flat[i] = orig - eps
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    a = a.detach().double()
    b = b.detach().double()
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), floor))


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Seedable counter-based (Philox) generator handed to every sampling site.

    Draws are produced in float64 by numpy and cast, so a seed yields the same
    stream regardless of the working precision.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape: Sequence[int], dtype=torch.float64, device=None) -> torch.Tensor:
        a = self._gen.standard_normal(tuple(shape))
        return torch.from_numpy(a).to(dtype=dtype, device=device)

    def normal_like(self, t: torch.Tensor) -> torch.Tensor:
        return self.normal(t.shape, dtype=t.dtype, device=t.device)

    def uniform(self, shape: Sequence[int] = ()) -> np.ndarray:
        return self._gen.random(tuple(shape))

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: np.ndarray) -> np.ndarray:
        return (self._gen.random(p.shape) < p).astype(np.uint8)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, deterministic in (seed, key)."""
        return Rng(hash_seed(self.seed, key))

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def hash_seed(*parts: int) -> int:
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
