"""Test-time metrics: ELBO-based NLL bound, Active Units and per-layer KL."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import binarize_dynamic
from .tensor_core import Rng, UsageError, hash_seed


def _binarized(images: np.ndarray, seed: int, dtype) -> torch.Tensor:
    """Fixed binarization of uint8 intensities; float arrays are taken as already binary."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        return torch.as_tensor(images, dtype=dtype)
    return torch.from_numpy(binarize_dynamic(images, Rng(hash_seed(seed, 1)))).to(dtype)


@torch.no_grad()
def eval_nll_bound(
    model,
    images: np.ndarray,
    seed: int = 0,
    k: int = 1,
    batch_size: int = 500,
    dtype=torch.float32,
    return_parts: bool = False,
):
    """Mean negative ELBO in nats per datapoint, averaged over ``k`` noise draws.

    The diffusion term is evaluated with the full ``T``-step sum.
    """
    was_training = model.training
    model.eval()
    x_all = _binarized(images, seed, dtype)
    rng = Rng(hash_seed(seed, 2))
    total, count = 0.0, 0
    kl_sum = None
    parts_acc: dict[str, float] = {}
    for _ in range(k):
        for start in range(0, x_all.shape[0], batch_size):
            x = x_all[start : start + batch_size]
            rep = model.forward_train(x, rng, diffusion_mode="full")
            total += float(rep.nll_bound.double().sum())
            count += x.shape[0]
            kls = rep.kl.double().sum(0)
            kl_sum = kls if kl_sum is None else kl_sum + kls
            for key, v in rep.parts().items():
                if key != "kl":
                    parts_acc[key] = parts_acc.get(key, 0.0) + float(v) * x.shape[0]
    model.train(was_training)
    nll = total / count
    if not return_parts:
        return nll
    parts = {key: v / count for key, v in parts_acc.items()}
    parts["kl"] = (kl_sum / count).tolist()
    parts["nll"] = nll
    return parts


class RowRng:
    """Rng stand-in giving every batch row its own stream, keyed by the caller.

    Only ``normal``/``normal_like`` with a leading batch axis are supported,
    which is all the posterior pass draws.
    """

    def __init__(self, keys: list[int]):
        self.rows = [Rng(key) for key in keys]

    def normal(self, shape, dtype=torch.float64, device=None) -> torch.Tensor:
        if shape[0] != len(self.rows):
            raise UsageError(f"RowRng has {len(self.rows)} rows, asked for {tuple(shape)}")
        return torch.stack([r.normal(shape[1:], dtype, device) for r in self.rows])

    def normal_like(self, t: torch.Tensor) -> torch.Tensor:
        return self.normal(t.shape, dtype=t.dtype, device=t.device)


def _content_key(seed: int, row: np.ndarray) -> int:
    digest = hashlib.sha256(np.ascontiguousarray(row).tobytes()).digest()
    return hash_seed(seed, int.from_bytes(digest[:8], "little"))


@dataclass
class AuReport:
    activity: list  # per layer, flattened per-dimension variances
    delta: float
    au: float
    per_layer: list

    def summary(self) -> dict:
        return {"au": self.au, "delta": self.delta, "per_layer": self.per_layer, "dims": [len(a) for a in self.activity]}


@torch.no_grad()
def active_units(
    model,
    images: np.ndarray,
    delta: float = 0.01,
    k: int = 5,
    seed: int = 0,
    batch_size: int = 500,
    dtype=torch.float32,
) -> AuReport:
    """Fraction of latent dimensions whose posterior mean varies across the test set.

    ``model`` only needs ``posterior_means(x, rng) -> list[Tensor]`` (one
    tensor ``[n, ...]`` per layer). Each inner expectation averages ``k``
    posterior chains; the variance across datapoints is the population
    variance.
    """
    if len(images) == 0:
        raise UsageError("active_units: empty test set")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    images = np.asarray(images)
    # noise keyed by datapoint content, so the result ignores test-set order
    keys = [_content_key(seed, row) for row in images]
    if images.dtype == np.uint8:
        x_all = torch.from_numpy(
            np.stack([binarize_dynamic(row, Rng(key)) for row, key in zip(images, keys)])
        ).to(dtype)
    else:
        x_all = torch.as_tensor(images, dtype=dtype)
    means = None
    for start in range(0, x_all.shape[0], batch_size):
        x = x_all[start : start + batch_size]
        block_keys = keys[start : start + batch_size]
        acc = None
        for j in range(k):
            layers = model.posterior_means(x, RowRng([hash_seed(key, 3, j) for key in block_keys]))
            flat = [m.reshape(m.shape[0], -1).double() for m in layers]
            acc = flat if acc is None else [a + f for a, f in zip(acc, flat)]
        acc = [a / k for a in acc]
        means = acc if means is None else [torch.cat([m, a]) for m, a in zip(means, acc)]
    if hasattr(model, "train"):
        model.train(was_training)
    activity = [m.var(dim=0, unbiased=False) for m in means]
    active = [(a > delta) for a in activity]
    total_dims = sum(a.numel() for a in activity)
    au = float(sum(int(a.sum()) for a in active)) / total_dims
    return AuReport(
        [a.tolist() for a in activity],
        delta,
        au,
        [float(a.double().mean()) for a in active],
    )


def write_report(path, report: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


__all__ = ["AuReport", "RowRng", "active_units", "eval_nll_bound", "write_report"]
