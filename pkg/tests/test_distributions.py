import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dvpvae.distributions import (
    BernoulliLikelihood,
    DiagGaussian,
    bernoulli_log_prob,
    gaussian_entropy,
    kl_diag_gaussian,
    per_datapoint,
    rsample,
)
from dvpvae.tensor_core import DimensionError, Rng, UsageError

from conftest import central_diff, rel_err


def _normal_logpdf(x, mu, sd):
    return -0.5 * np.log(2 * np.pi * sd**2) - (x - mu) ** 2 / (2 * sd**2)


def test_logvar_clamped_at_construction():
    g = DiagGaussian(torch.zeros(3), torch.tensor([-40.0, 0.0, 40.0]))
    assert g.logvar.min() >= -10 and g.logvar.max() <= 10
    raw = DiagGaussian(torch.zeros(1), torch.tensor([-40.0]), clamp=False)
    assert float(raw.logvar) == -40.0
    with pytest.raises(DimensionError):
        DiagGaussian(torch.zeros(2), torch.zeros(3))


def test_rsample_examples():
    g = DiagGaussian(torch.randn(4), torch.randn(4))
    assert torch.equal(rsample(g, 0.0, Rng(0)), g.mu)
    assert torch.equal(rsample(g, 1.0, Rng(5)), rsample(g, 1.0, Rng(5)))
    with pytest.raises(UsageError):
        rsample(g, -1.0, Rng(0))
    z = rsample(DiagGaussian(torch.zeros(100_000), torch.zeros(100_000)), 1.0, Rng(1))
    assert abs(float(z.var()) - 1) < 0.02


def test_kl_examples():
    g = DiagGaussian(torch.randn(5), torch.randn(5))
    assert float(kl_diag_gaussian(g, g).abs().max()) < 1e-15
    one = kl_diag_gaussian(DiagGaussian(torch.ones(1), torch.zeros(1)), DiagGaussian(torch.zeros(1), torch.zeros(1)))
    assert float(one) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DimensionError):
        kl_diag_gaussian(DiagGaussian(torch.zeros(2), torch.zeros(2)), DiagGaussian(torch.zeros(3), torch.zeros(3)))


def test_kl_matches_monte_carlo():
    g = np.random.default_rng(0)
    mq, mp = g.normal(size=4), g.normal(size=4)
    sq, sp = np.exp(g.normal(size=4) * 0.3), np.exp(g.normal(size=4) * 0.3)
    q = DiagGaussian(torch.from_numpy(mq), torch.from_numpy(2 * np.log(sq)))
    p = DiagGaussian(torch.from_numpy(mp), torch.from_numpy(2 * np.log(sp)))
    analytic = float(kl_diag_gaussian(q, p).sum())
    x = mq + sq * g.normal(size=(1_000_000, 4))
    ratio = (_normal_logpdf(x, mq, sq) - _normal_logpdf(x, mp, sp)).sum(1)
    se = ratio.std() / math.sqrt(len(ratio))
    assert abs(ratio.mean() - analytic) < 3 * se


def test_kl_nonnegative_on_random_draws():
    g = torch.Generator().manual_seed(0)
    shape = (10_000,)
    q = DiagGaussian(torch.randn(shape, generator=g) * 3, torch.randn(shape, generator=g) * 3)
    p = DiagGaussian(torch.randn(shape, generator=g) * 3, torch.randn(shape, generator=g) * 3)
    assert (kl_diag_gaussian(q, p) >= -1e-12).all()


def test_kl_gradients():
    g = torch.Generator().manual_seed(3)
    args = [torch.randn(2, 3, generator=g).requires_grad_(True) for _ in range(4)]

    def f(mq, lq, mp, lp):
        return per_datapoint(kl_diag_gaussian(DiagGaussian(mq, lq), DiagGaussian(mp, lp))).sum()

    f(*args).backward()
    for i, a in enumerate(args):
        def fi(v, i=i):
            vals = list(args)
            vals[i] = v
            return f(*vals)

        assert rel_err(a.grad, central_diff(fi, a)) < 1e-4


def test_entropy_examples():
    assert float(gaussian_entropy(torch.tensor(0.0), 1)) == pytest.approx(1.418939, abs=1e-6)
    assert float(gaussian_entropy(torch.tensor(0.0), 49)) == pytest.approx(69.528, abs=1e-3)
    with pytest.raises(UsageError):
        gaussian_entropy(torch.tensor(0.0), 0)


@pytest.mark.parametrize("sigma", [0.1, 1.0, 3.0])
def test_entropy_matches_monte_carlo(sigma):
    P = 5
    g = np.random.default_rng(int(sigma * 10))
    mu = g.normal(size=P)
    x = mu + sigma * g.normal(size=(200_000, P))
    neg_log = -_normal_logpdf(x, mu, sigma).sum(1)
    se = neg_log.std() / math.sqrt(len(neg_log))
    assert abs(neg_log.mean() - float(gaussian_entropy(torch.tensor(math.log(sigma)), P))) < 3 * se


def test_bernoulli_examples():
    half = bernoulli_log_prob(BernoulliLikelihood(torch.zeros(1)), torch.ones(1))
    assert float(half) == pytest.approx(-0.693147, abs=1e-6)
    sat = bernoulli_log_prob(BernoulliLikelihood(torch.full((1,), 20.0)), torch.ones(1))
    assert abs(float(sat)) < 1e-8
    with pytest.raises(UsageError):
        bernoulli_log_prob(BernoulliLikelihood(torch.zeros(2)), torch.tensor([0.5, 1.0]))
    with pytest.raises(DimensionError):
        bernoulli_log_prob(BernoulliLikelihood(torch.zeros(2)), torch.ones(3))


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_bernoulli_matches_naive_formula(seed):
    g = np.random.default_rng(seed)
    logits = g.normal(size=(1, 10)) * 3
    x = (g.random((1, 10)) < 0.5).astype(np.float64)
    p = 1 / (1 + np.exp(-logits))
    naive = (x * np.log(p) + (1 - x) * np.log(1 - p)).sum()
    got = bernoulli_log_prob(BernoulliLikelihood(torch.from_numpy(logits)), torch.from_numpy(x))
    assert abs(float(got[0]) - naive) < 1e-9


def test_bernoulli_sample_and_mean():
    lik = BernoulliLikelihood(torch.zeros(50_000))
    assert torch.equal(lik.mean, torch.full((50_000,), 0.5))
    s = lik.sample(Rng(0))
    assert set(s.unique().tolist()) <= {0.0, 1.0}
    assert abs(float(s.mean()) - 0.5) < 0.01
