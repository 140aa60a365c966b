"""``dvpvae`` command line: train, eval, sample, reconstruct, inspect-dct."""
from __future__ import annotations

import functools
import json
import logging
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from . import dct as dctlib
from .checkpoint import CheckpointError, load_model, training_state
from .config import ConfigError, dump_config, load_config
from .data import FormatError, load_split, train_val_split
from .metrics import active_units, eval_nll_bound, write_report
from .model import DVPVAE
from .tensor_core import DimensionError, Rng, UsageError, hash_seed
from .trainer import TrainConfig, TrainingFault, fit

_EXPECTED = (ConfigError, CheckpointError, FormatError, UsageError, DimensionError, TrainingFault, FileNotFoundError)

# fixed sub-seed tags so every command draws from its own stream
VAL_TAG = 7919
SAMPLE_TAG = 11
RECON_TAG = 13


def _friendly(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _EXPECTED as e:
            raise click.ClickException(f"{type(e).__name__}: {e}") from None

    return wrapper


def image_grid(images: np.ndarray, ncol: int, pad: int = 2, fill: int = 128) -> np.ndarray:
    """Tile ``n×D×D`` floats in [0, 1] into one uint8 image, row-major."""
    images = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    n, D = images.shape[0], images.shape[-1]
    nrow = -(-n // ncol)
    grid = np.full((nrow * (D + pad) + pad, ncol * (D + pad) + pad), fill, dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, ncol)
        y, x = pad + r * (D + pad), pad + c * (D + pad)
        grid[y : y + D, x : x + D] = np.round(img * 255).astype(np.uint8)
    return grid


def save_png(path, grid: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="L").save(path)


def _first_channel(t: torch.Tensor) -> np.ndarray:
    return t[:, 0].detach().double().cpu().numpy()


def norm_matrix_for(train_images: np.ndarray, d: int, digest: str) -> dctlib.NormMatrix:
    """``S`` over intensities scaled to [0, 1]."""
    batches = (train_images[i : i + 1000].astype(np.float64) / 255.0 for i in range(0, len(train_images), 1000))
    return dctlib.compute_norm_matrix(batches, d, digest)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log debug output.")
def main(verbose: bool):
    """Hierarchical VAE with a diffusion prior over DCT pseudoinputs."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@_friendly
def train(config_path, data_dir, out_dir, seed, resume):
    """Train a model; writes checkpoints, train_log.jsonl and metrics.json under --out."""
    model_cfg, train_cfg = load_config(config_path)
    if seed is not None:
        train_cfg.seed = seed
    full = load_split(data_dir, "train")
    train_ds, val_ds = train_val_split(full, train_cfg.val_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(model_cfg, train_cfg))

    state = None
    if resume:
        model, ck = load_model(resume, use_ema=False, dtype=train_cfg.torch_dtype)
        if ck.header["dct_digest"] != train_ds.digest:
            raise UsageError("resume checkpoint was trained on different data")
        state = training_state(ck, model)
    else:
        torch.manual_seed(train_cfg.seed)  # parameter init; training noise comes from Rng
        S = norm_matrix_for(train_ds.images, model_cfg.pseudoinput_side, train_ds.digest)
        model = DVPVAE(model_cfg, S)
    n_params = sum(p.numel() for p in model.parameters())
    click.echo(f"parameters: {n_params}  train: {len(train_ds)}  val: {len(val_ds)}")
    res = fit(model, train_ds, val_ds, train_cfg, out_dir=out, state=state)
    final = res.epochs[-1] if res.epochs else {}
    write_report(
        out / "metrics.json",
        {
            "parameters": n_params,
            "best_val_nll": res.best_val,
            "final_val_nll": final.get("val_nll"),
            "epochs": [{k: v for k, v in ep.items() if k != "kind"} for ep in res.epochs],
        },
    )
    click.echo(f"final val NLL bound: {final.get('val_nll', float('nan')):.4f}")


def _split_images(ckpt_header: dict, data_dir, split: str) -> np.ndarray:
    if split == "test":
        return load_split(data_dir, "test").images
    tcfg = TrainConfig(**ckpt_header["train_config"])
    tr, val = train_val_split(load_split(data_dir, "train"), tcfg.val_size)
    return (tr if split == "train" else val).images


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--metrics", default="elbo,au", show_default=True)
@click.option("--split", type=click.Choice(["test", "val", "train"]), default="test", show_default=True)
@click.option("--seed", type=int, default=None, help="Defaults to the validation seed used during training.")
@click.option("--samples", type=int, default=None, help="Noise draws per datapoint for the bound.")
@click.option("--report", type=click.Path(dir_okay=False), default=None)
@_friendly
def eval_cmd(ckpt, data_dir, metrics, split, seed, samples, report):
    """Print the NLL bound (nats) and AU percentage; write a JSON report."""
    wanted = [m.strip() for m in metrics.split(",") if m.strip()]
    bad = set(wanted) - {"elbo", "au"}
    if bad or not wanted:
        raise click.BadParameter(f"unknown metrics {sorted(bad)}; choose from elbo, au", param_hint="--metrics")
    model, ck = load_model(ckpt)
    tcfg = TrainConfig(**ck.header["train_config"])
    seed = hash_seed(tcfg.seed, VAL_TAG) if seed is None else seed
    samples = tcfg.eval_samples if samples is None else samples
    images = _split_images(ck.header, data_dir, split)
    out = {"checkpoint": str(ckpt), "split": split, "seed": seed, "step": ck.step, "n": int(len(images))}
    if "elbo" in wanted:
        parts = eval_nll_bound(model, images, seed=seed, k=samples, return_parts=True)
        out["elbo"] = parts
        click.echo(f"NLL bound: {parts['nll']:.4f} nats")
    if "au" in wanted:
        rep = active_units(model, images, seed=seed)
        out["au"] = rep.summary()
        click.echo(f"AU: {100 * rep.au:.2f}%")
    report = Path(report) if report else Path(ckpt).with_name(f"{Path(ckpt).stem}.{split}.report.json")
    write_report(report, out)
    click.echo(f"report: {report}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--n", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--temperature", type=click.FloatRange(min=0.0), default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--show-pseudoinputs", is_flag=True, help="Prefix each row of samples with a row of u_x lifts.")
@click.option("--ncol", type=click.IntRange(min=1), default=10, show_default=True)
@_friendly
def sample(ckpt, n, temperature, seed, out_path, show_pseudoinputs, ncol):
    """Draw unconditional samples and save Bernoulli means as a PNG grid."""
    model, _ = load_model(ckpt)
    model.eval()
    res = model.generate(n, temperature, Rng(hash_seed(seed, SAMPLE_TAG)))
    means = _first_channel(res["mean"])
    ncol = min(ncol, n)
    if show_pseudoinputs:
        lifts = _first_channel(res["u_x"])
        tiles = []
        for start in range(0, n, ncol):
            block = slice(start, min(start + ncol, n))
            for part in (lifts[block], means[block]):
                pad = ncol - len(part)
                tiles.append(np.concatenate([part, np.zeros((pad,) + part.shape[1:])]) if pad else part)
        means = np.concatenate(tiles)
    save_png(out_path, image_grid(means, ncol))
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--scales", default=None, help="Scales, coarse first, whose latents come from the posterior, e.g. 7,14.")
@click.option("--temperature", type=click.FloatRange(min=0.0), default=1.0, show_default=True)
@click.option("--n", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_friendly
def reconstruct(ckpt, data_dir, scales, temperature, n, seed, out_path):
    """Generative reconstructions.

    Row 0 holds test images. Row k uses posterior latents at the first k-1
    listed scales and prior samples elsewhere, always conditioned on the
    image's pseudoinput.
    """
    model, _ = load_model(ckpt)
    model.eval()
    if scales is None:
        order = sorted({side for side, _ in model.cfg.scales})
    else:
        try:
            order = [int(s) for s in scales.split(",") if s.strip()]
        except ValueError:
            raise click.BadParameter(f"not a comma-separated list of ints: {scales!r}", param_hint="--scales") from None
    images = load_split(data_dir, "test").images[:n]
    x = torch.from_numpy(np.round(images.astype(np.float64) / 255.0)).float()
    rows = [x[:, 0].double().numpy()]
    for k in range(len(order) + 1):
        lik = model.generative_reconstruction(x, order[:k], temperature, Rng(hash_seed(seed, RECON_TAG)))
        rows.append(_first_channel(lik.mean))
    save_png(out_path, image_grid(np.concatenate(rows), len(images)))
    click.echo(f"wrote {out_path}")


@main.command("inspect-dct")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--d", "d", type=click.IntRange(min=1), default=7, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--n", type=click.IntRange(min=1), default=8, show_default=True)
@_friendly
def inspect_dct(data_dir, d, out_dir, n):
    """Write S and (x, u, u_x) triptychs for the first test images."""
    train_ds = load_split(data_dir, "train")
    S = norm_matrix_for(train_ds.images, d, train_ds.digest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "S.npy", S.S.numpy())
    (out / "S.json").write_text(json.dumps({"d": d, "digest": S.digest, "S": S.S.tolist()}, indent=1) + "\n")
    x = torch.from_numpy(load_split(data_dir, "test").images[:n].astype(np.float64) / 255.0)
    D = x.shape[-1]
    u = dctlib.f_dct(x, S, d)
    u_x = dctlib.f_dct_dagger(u, S, D)
    # u lies in [-1, 1]; show it magnified to image size with 0 mapped to mid-gray
    scale = -(-D // d)
    u_img = ((u[:, 0] + 1) / 2).repeat_interleave(scale, -1).repeat_interleave(scale, -2)[:, :D, :D]
    tiles = []
    for i in range(x.shape[0]):
        tiles += [x[i, 0].numpy(), u_img[i].numpy(), u_x[i, 0].numpy()]
    save_png(out / "triptychs.png", image_grid(np.stack(tiles), 3))
    click.echo(f"wrote {out / 'S.npy'} and {out / 'triptychs.png'}")


if __name__ == "__main__":
    main()
