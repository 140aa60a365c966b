import numpy as np
import pytest
import torch

from dvpvae.model import DVPVAE, ModelConfig

torch.set_default_dtype(torch.float64)
torch.set_num_threads(1)


def central_diff(f, x, eps=1e-4):
    """Plain central differences, written independently of the package helper."""
    x = x.detach().clone()
    out = torch.zeros_like(x)
    xf, of = x.view(-1), out.view(-1)
    with torch.no_grad():
        return _fill(f, x, xf, of, out, eps)


def _fill(f, x, xf, of, out, eps):
    for i in range(xf.numel()):
        keep = xf[i].item()
        xf[i] = keep + eps
        hi = float(f(x))
        xf[i] = keep - eps
        lo = float(f(x))
        xf[i] = keep
        of[i] = (hi - lo) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = torch.as_tensor(a).detach().double(), torch.as_tensor(b).detach().double()
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        image_side=4,
        scales=[(4, 1), (2, 1)],
        latent_channels=1,
        n_enc=1,
        c_in=4,
        c_hid=4,
        head_blocks=1,
        pseudoinput_side=2,
        diffusion_steps=5,
        prior_channels=4,
        prior_blocks=1,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw) -> DVPVAE:
    torch.manual_seed(seed)
    model = DVPVAE(tiny_config(**kw)).double()
    # perturb so no branch is trivially zero (zero-init output convs etc.)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return model


def binary_batch(n, side, seed=0):
    g = np.random.default_rng(seed)
    return torch.from_numpy((g.random((n, 1, side, side)) < 0.4).astype(np.float64))


@pytest.fixture
def tiny():
    return tiny_model()


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
