import numpy as np
import pytest
import torch

from dvpvae.checkpoint import (
    MAGIC,
    CheckpointError,
    load_model,
    read_container,
    resave,
    save_checkpoint,
    training_state,
    write_container,
)
from dvpvae.model import DVPVAE
from dvpvae.tensor_core import Rng
from dvpvae.trainer import AdamaxState, TrainConfig, adamax_step, ema_update

from test_trainer import tiny8_config


@pytest.fixture
def saved(tmp_path):
    torch.manual_seed(0)
    model = DVPVAE(tiny8_config())
    params = dict(model.named_parameters())
    shadows, opt = {}, AdamaxState()
    ema_update(params, shadows, 0.9)
    grads = {k: torch.randn_like(p) for k, p in params.items()}
    adamax_step(params, grads, 1e-3, state=opt)
    ema_update(params, shadows, 0.9)
    rng = Rng(4)
    rng.normal((3,))
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, model, shadows, opt, TrainConfig(), rng, step=1, extra={"epoch": 1, "best_val": 1.5})
    return path, model, shadows, opt


def test_container_layout(saved):
    path, *_ = saved
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    ck = read_container(path)
    assert ck.step == 1 and ck.header["epoch"] == 1
    assert "format_version" not in ck.header and "tensors" not in ck.header


def test_resave_is_byte_identical(saved, tmp_path):
    path, *_ = saved
    resave(path, tmp_path / "b.ckpt")
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_every_parameter_present_once(saved):
    path, model, shadows, opt = saved
    ck = read_container(path)
    names = list(ck.tensors)
    assert len(names) == len(set(names))
    expected = {n for n in model.state_dict() if not n.startswith("prior_net.") and n != "dct_S"}
    assert {n[len("model."):] for n in names if n.startswith("model.")} == expected
    assert {n[len("prior."):] for n in names if n.startswith("prior.")} == {
        n[len("prior_net."):] for n in model.state_dict() if n.startswith("prior_net.")
    }
    assert "dct.S" in names
    assert set(ck.group("ema.")) == set(dict(model.named_parameters()))
    assert set(ck.group("opt.m.")) == set(opt.m) and set(ck.group("opt.v.")) == set(opt.v)
    for name, s in shadows.items():
        assert ck.tensors["ema." + name].shape == tuple(s.shape)


def test_load_model_uses_ema_weights_by_default(saved):
    path, model, shadows, _ = saved
    ema_model, _ = load_model(path, dtype=torch.float64)
    live_model, _ = load_model(path, use_ema=False, dtype=torch.float64)
    for name, p in ema_model.named_parameters():
        assert torch.equal(p, shadows[name])
    for name, p in live_model.named_parameters():
        assert torch.equal(p, dict(model.named_parameters())[name])
    assert torch.equal(ema_model.dct_S, model.dct_S)


def test_training_state_round_trip(saved):
    path, model, shadows, opt = saved
    model2, ck = load_model(path, use_ema=False, dtype=torch.float64)
    state = training_state(ck, model2)
    assert state["step"] == 1 and state["opt"].step == opt.step and state["best_val"] == 1.5
    for k in opt.m:
        assert torch.equal(state["opt"].m[k], opt.m[k]) and torch.equal(state["opt"].v[k], opt.v[k])
    r = Rng(0)
    r.set_state(state["rng"])
    ref = Rng(4)
    ref.normal((3,))
    assert torch.equal(r.normal((5,)), ref.normal((5,)))


def test_corrupt_files_rejected(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "x")
    with pytest.raises(CheckpointError):
        write_container(tmp_path / "y", {}, {"a": np.zeros(2, dtype=np.complex64)})
