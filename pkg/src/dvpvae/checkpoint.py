"""Versioned checkpoint container.

Layout: the magic ``b"DVPV1"``, a little-endian u64 header length, a UTF-8
JSON header and then the raw little-endian tensor payload. The header holds
the config snapshot, RNG state, step counter and a table of
``name -> {dtype, shape, offset, nbytes}``. Tensor names:

* ``model.*``  VAE parameters and buffers
* ``prior.*``  diffusion denoiser parameters
* ``dct.S``    normalization matrix, extents ``[c, d, d]``
* ``ema.*``    EMA shadows (same suffixes as the live parameters)
* ``opt.m.*`` / ``opt.v.*``  Adamax moments
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DVPV1"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.header["step"]

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _param_to_table(name: str) -> str:
    if name == "dct_S":
        return "dct.S"
    if name.startswith("prior_net."):
        return "prior." + name[len("prior_net.") :]
    return "model." + name


def _table_to_param(name: str) -> str:
    if name == "dct.S":
        return "dct_S"
    if name.startswith("prior."):
        return "prior_net." + name[len("prior.") :]
    if name.startswith("model."):
        return name[len("model.") :]
    raise CheckpointError(f"not a model tensor: {name}")


def _jsonable_rng_state(state: dict) -> dict:
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return conv(state)


def _restore_rng_state(state: dict) -> dict:
    def conv(v):
        if isinstance(v, dict):
            if "__ndarray__" in v:
                return np.array(v["__ndarray__"], dtype=v["dtype"])
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(state)


def model_tensors(model) -> dict[str, torch.Tensor]:
    return {_param_to_table(k): v for k, v in model.state_dict().items()}


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    table, chunks, offset = {}, [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dt} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        table[name] = {"dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    full = dict(header, format_version=FORMAT_VERSION, tensors=table)
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)
    tmp.replace(path)


def read_container(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a DVPV1 checkpoint")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    payload = start + hlen
    tensors = {}
    table = header.pop("tensors")
    for name, meta in sorted(table.items(), key=lambda kv: kv[1]["offset"]):
        a = np.frombuffer(raw, dtype=_DTYPES[meta["dtype"]], count=int(np.prod(meta["shape"], dtype=np.int64)), offset=payload + meta["offset"])
        tensors[name] = a.reshape(meta["shape"]).astype(meta["dtype"])
    header.pop("format_version")
    return Checkpoint(header, tensors)


def save_checkpoint(path, model, shadows, opt, train_cfg, rng, step: int, extra: dict | None = None) -> None:
    from dataclasses import asdict

    tensors = {k: v.detach().cpu().numpy() for k, v in model_tensors(model).items()}
    for name, s in shadows.items():
        tensors["ema." + name] = s.detach().cpu().numpy()
    for name, m in opt.m.items():
        tensors["opt.m." + name] = m.detach().cpu().numpy()
    for name, v in opt.v.items():
        tensors["opt.v." + name] = v.detach().cpu().numpy()
    header = {
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "rng_state": _jsonable_rng_state(rng.get_state()),
        "step": int(step),
        "opt_step": int(opt.step),
        "dct_digest": model.S_digest,
        **(extra or {}),
    }
    write_container(path, header, tensors)


def resave(src, dst) -> None:
    ck = read_container(src)
    write_container(dst, ck.header, ck.tensors)


def load_model(path, use_ema: bool = True, dtype=torch.float32):
    """Rebuild a model from a checkpoint; EMA weights are loaded by default."""
    from .model import DVPVAE, ModelConfig

    ck = read_container(path) if not isinstance(path, Checkpoint) else path
    cfg = ModelConfig(**ck.header["model_config"])
    model = DVPVAE(cfg)
    state = {}
    for name, arr in ck.tensors.items():
        if name.split(".")[0] in ("model", "prior") or name == "dct.S":
            state[_table_to_param(name)] = torch.from_numpy(arr.copy())
    if use_ema:
        for name, arr in ck.group("ema.").items():
            state[name] = torch.from_numpy(arr.copy())
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.S_digest = ck.header.get("dct_digest", "")
    model.to(dtype)
    return model, ck


def training_state(ck: Checkpoint, model) -> dict:
    """Optimizer/EMA/RNG state for resuming :func:`trainer.fit`."""
    from .trainer import AdamaxState

    params = dict(model.named_parameters())
    as_t = lambda a, name: torch.from_numpy(a.copy()).to(params[name])  # noqa: E731
    opt = AdamaxState(
        step=ck.header["opt_step"],
        m={k: as_t(v, k) for k, v in ck.group("opt.m.").items()},
        v={k: as_t(v, k) for k, v in ck.group("opt.v.").items()},
    )
    ema = {k: as_t(v, k) for k, v in ck.group("ema.").items()}
    return {
        "step": ck.header["step"],
        "epoch": ck.header["epoch"],
        "opt": opt,
        "ema": ema,
        "rng": _restore_rng_state(ck.header["rng_state"]),
        "best_val": ck.header.get("best_val", float("inf")),
    }
