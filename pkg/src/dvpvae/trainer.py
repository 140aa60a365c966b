"""Adamax + cosine schedule + EMA training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, binarize_dynamic, iterate_batches
from .tensor_core import Rng, UsageError, hash_seed

log = logging.getLogger(__name__)


class TrainingFault(RuntimeError):
    """Non-finite loss or gradient; carries a diagnostic dump."""

    def __init__(self, msg: str, dump: dict | None = None):
        super().__init__(msg)
        self.dump = dump or {}


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 250
    lr: float = 1e-2
    end_lr: float = 1e-5
    warmup_epochs: float = 2
    weight_decay: float = 1e-6
    ema_rate: float = 0.999
    clip_norm: float = 5.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-7
    seed: int = 0
    val_size: int = 10000
    checkpoint_every: int = 10
    eval_samples: int = 1
    dtype: str = "float32"
    num_threads: int = 1
    max_steps: int | None = None
    snapshot_epochs: tuple = (1,)  # kept as epoch{N}.ckpt

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.snapshot_epochs = tuple(int(e) for e in self.snapshot_epochs)
        if not self.warmup_epochs < self.epochs:
            raise UsageError("warmup_epochs must be smaller than epochs")
        if self.clip_norm <= 0:
            raise UsageError("clip_norm must be positive")
        if not 0 < self.ema_rate < 1:
            raise UsageError("ema_rate must lie in (0, 1)")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


# ---------------------------------------------------------------------------
# optimizer pieces


@dataclass
class AdamaxState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adamax_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    lr: float,
    betas=(0.9, 0.999),
    weight_decay: float = 0.0,
    state: AdamaxState | None = None,
    eps: float = 1e-7,
) -> AdamaxState:
    """In-place Adamax update with decoupled weight decay applied first."""
    state = AdamaxState() if state is None else state
    b1, b2 = betas
    state.step += 1
    bias = 1 - b1**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise TrainingFault(f"non-finite gradient in {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        if weight_decay:
            p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        torch.maximum(v * b2, g.abs(), out=v)
        p.sub_(lr * m / (bias * (v + eps)))
    return state


def cosine_lr(step: float, total: float, warmup: float, lr0: float, lr1: float) -> float:
    if step < warmup:
        return lr0 * step / warmup
    progress = min(1.0, (step - warmup) / max(total - warmup, 1e-12))
    return lr1 + 0.5 * (lr0 - lr1) * (1 + math.cos(math.pi * progress))


@torch.no_grad()
def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float) -> tuple[dict, float]:
    """Scale all grads in place so their joint L2 norm is at most ``max_norm``.

    Returns the grads and the norm observed *before* clipping.
    """
    if max_norm <= 0:
        raise UsageError("max_norm must be positive")
    norm = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g.mul_(scale)
    return grads, norm


def ema_rate_at(rate: float, updates: int | None) -> float:
    """Warmed-up decay ``min(rate, (1 + n) / (10 + n))``; ``None`` disables the warmup."""
    if updates is None:
        return rate
    return min(rate, (1 + updates) / (10 + updates))


@torch.no_grad()
def ema_update(
    params: dict[str, torch.Tensor], shadows: dict[str, torch.Tensor], rate: float, updates: int | None = None
) -> dict:
    rate = ema_rate_at(rate, updates)
    for name, p in params.items():
        s = shadows.get(name)
        if s is None:
            shadows[name] = p.detach().clone()
        else:
            s.mul_(rate).add_(p.detach(), alpha=1 - rate)
    return shadows


class swap_in_ema:
    """Context manager evaluating a model with its EMA weights."""

    def __init__(self, model: torch.nn.Module, shadows: dict[str, torch.Tensor]):
        self.model, self.shadows, self.backup = model, shadows, {}

    def __enter__(self):
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                if name in self.shadows:
                    self.backup[name] = p.detach().clone()
                    p.copy_(self.shadows[name])
        return self.model

    def __exit__(self, *exc):
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                if name in self.backup:
                    p.copy_(self.backup[name])


# ---------------------------------------------------------------------------
# loop


def to_batch(images: np.ndarray, rng: Rng, dtype) -> torch.Tensor:
    return torch.from_numpy(binarize_dynamic(images, rng)).to(dtype)


@torch.no_grad()
def evaluate_bound(model, images: np.ndarray, seed: int, dtype, batch_size: int = 500, samples: int = 1) -> float:
    """Mean negative ELBO (nats) with the full T-term diffusion sum."""
    from .metrics import eval_nll_bound

    return eval_nll_bound(model, images, seed=seed, k=samples, batch_size=batch_size, dtype=dtype)


@dataclass
class FitResult:
    log: list
    epochs: list
    best_val: float
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def fit(
    model,
    train: Dataset,
    val: Dataset | None,
    cfg: TrainConfig,
    out_dir=None,
    state: dict | None = None,
    on_epoch=None,
) -> FitResult:
    """Train ``model`` with the Adamax/cosine/EMA recipe.

    Writes ``train_log.jsonl`` (one record per step and per epoch) and
    checkpoints under ``out_dir`` when given. ``state`` resumes from a loaded
    checkpoint (keys: step, epoch, opt, ema, rng, best_val).
    """
    from .checkpoint import save_checkpoint

    torch.set_num_threads(cfg.num_threads)
    dtype = cfg.torch_dtype
    model.to(dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_file = open(out / "train_log.jsonl", "a" if state else "w") if out is not None else None

    params = dict(model.named_parameters())
    rng = Rng(cfg.seed)
    opt = AdamaxState()
    shadows: dict = {}
    step, start_epoch, best_val = 0, 0, math.inf
    if state:
        step, start_epoch = state["step"], state["epoch"]
        opt = state["opt"]
        shadows = state["ema"]
        best_val = state.get("best_val", math.inf)
        rng.set_state(state["rng"])
    if not shadows:
        ema_update(params, shadows, cfg.ema_rate)

    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    records, epochs = [], []
    result = FitResult(records, epochs, best_val)

    def checkpoint(name: str, epoch: int) -> Path | None:
        if out is None:
            return None
        path = out / name
        save_checkpoint(
            path, model, shadows, opt, cfg, rng, step,
            extra={"epoch": epoch, "best_val": best_val},
        )
        return path

    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.time()
            model.train()
            epoch_losses = []
            for idx in iterate_batches(n, cfg.batch_size, rng):
                lr = cosine_lr(step, total, warmup, cfg.lr, cfg.end_lr)
                x = to_batch(train.images[idx], rng, dtype)
                report = model.forward_train(x, rng)
                loss = report.loss
                if not torch.isfinite(loss):
                    raise TrainingFault(
                        f"non-finite loss at step {step}",
                        {"step": step, "parts": report.parts(), "lr": lr},
                    )
                for p in params.values():
                    p.grad = None
                loss.backward()
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                _, gnorm = clip_global_norm(grads, cfg.clip_norm)
                if not math.isfinite(gnorm):
                    raise TrainingFault(f"non-finite gradient norm at step {step}", {"step": step})
                adamax_step(params, grads, lr, cfg.betas, cfg.weight_decay, opt, cfg.adam_eps)
                ema_update(params, shadows, cfg.ema_rate, updates=step)
                step += 1
                rec = {
                    "kind": "step",
                    "step": step,
                    "epoch": epoch + 1,
                    "lr": lr,
                    "loss": float(loss.detach()),
                    "grad_norm": gnorm,
                    "parts": report.parts(),
                }
                records.append(rec)
                epoch_losses.append(rec["loss"])
                if log_file:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            ep = {
                "kind": "epoch",
                "epoch": epoch + 1,
                "step": step,
                "train_loss": float(np.mean(epoch_losses)),
                "sigma": float(torch.exp(model.log_sigma.detach())) if hasattr(model, "log_sigma") else None,
            }
            if val is not None:
                model.eval()
                with swap_in_ema(model, shadows):
                    ep["val_nll"] = evaluate_bound(model, val.images, hash_seed(cfg.seed, 7919), dtype, samples=cfg.eval_samples)
                improved = ep["val_nll"] < best_val
                if improved:
                    best_val = ep["val_nll"]
                    result.best_checkpoint = checkpoint("best.ckpt", epoch + 1)
            epochs.append(ep)
            if log_file:
                log_file.write(json.dumps(ep, sort_keys=True) + "\n")
                log_file.flush()
            log.info("epoch %d (%.1fs) %s", epoch + 1, time.time() - t0, {k: v for k, v in ep.items() if k != "kind"})
            if on_epoch is not None:
                on_epoch(ep)
            if epoch + 1 in cfg.snapshot_epochs:
                checkpoint(f"epoch{epoch + 1}.ckpt", epoch + 1)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                result.last_checkpoint = checkpoint("last.ckpt", epoch + 1)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                result.last_checkpoint = checkpoint("last.ckpt", epoch + 1)
                break
    except TrainingFault as fault:
        if out is not None:
            (out / "fault.json").write_text(json.dumps({"error": str(fault), **fault.dump}, indent=2, default=str))
        raise
    finally:
        if log_file:
            log_file.close()
    result.best_val = best_val
    return result


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
