"""TopDown hierarchical VAE with DCT pseudoinputs and a diffusion prior over them."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dct as dctlib
from .diffusion import DiffusionSchedule, EpsNet, l_vlb, sample_prior
from .distributions import (
    BernoulliLikelihood,
    DiagGaussian,
    bernoulli_log_prob,
    gaussian_entropy,
    kl_diag_gaussian,
    per_datapoint,
    rsample,
)
from .layers import ResBlock
from .tensor_core import DimensionError, Rng, UsageError, concat, resize_to


@dataclass
class ModelConfig:
    image_side: int = 28
    image_channels: int = 1
    # (spatial side, stochastic layers at that side), finest first
    scales: list = field(default_factory=lambda: [(14, 4), (7, 4)])
    latent_channels: int = 1
    n_enc: int = 3
    c_in: int = 32
    c_hid: int = 32
    head_blocks: int = 2
    pseudoinput_side: int = 7
    likelihood: str = "bernoulli"
    latent_aggregation: bool = True
    use_pseudoinputs: bool = True
    log_sigma_init: float = -2.0
    diffusion_steps: int = 50
    logsnr_min: float = -6.0
    logsnr_max: float = 7.0
    prior_channels: int = 16
    prior_blocks: int = 2

    def __post_init__(self):
        self.scales = [tuple(int(v) for v in s) for s in self.scales]
        if self.likelihood != "bernoulli":
            raise UsageError(f"unsupported likelihood {self.likelihood!r}")
        prev = self.image_side
        for side, n in self.scales:
            if n < 1 or side > prev or prev % side:
                raise UsageError(f"scale {side} does not evenly divide {prev}")
            prev = side
        if self.pseudoinput_side > self.image_side:
            raise UsageError("pseudoinput side exceeds image side")

    @property
    def L(self) -> int:
        return sum(n for _, n in self.scales)

    @property
    def layer_sides(self) -> list[int]:
        """Spatial side of z_1..z_L (z_1 finest)."""
        return [side for side, n in self.scales for _ in range(n)]

    @property
    def pseudoinput_dim(self) -> int:
        return self.image_channels * self.pseudoinput_side**2

    def to_dict(self) -> dict:
        return asdict(self)


class BottomUp(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.conv_in = nn.Conv2d(cfg.image_channels, cfg.c_in, 3, padding=1)
        self.stages = nn.ModuleList(
            nn.ModuleList(ResBlock(cfg.c_in, cfg.c_hid) for _ in range(cfg.n_enc)) for _ in cfg.scales
        )

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        cfg = self.cfg
        if tuple(x.shape[1:]) != (cfg.image_channels, cfg.image_side, cfg.image_side):
            raise DimensionError(f"expected images [n,{cfg.image_channels},{cfg.image_side},{cfg.image_side}], got {tuple(x.shape)}")
        h = self.conv_in(x)
        feats = {}
        for (side, _), blocks in zip(cfg.scales, self.stages):
            h = resize_to(h, side)
            for block in blocks:
                h = block(h)
            feats[side] = h
        return feats


class TopDownBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cz = cfg.latent_channels
        self.cz = cz
        self.prior_net = ResBlock(cfg.c_in + cfg.image_channels, cfg.c_hid, 2 * cz, out_scale=0.1)
        self.post_net = ResBlock(cfg.c_in, cfg.c_hid, 2 * cz, out_scale=0.1)
        self.z_proj = nn.Conv2d(cz, cfg.c_in, 1)
        self.out_net = ResBlock(cfg.c_in, cfg.c_hid, out_scale=1 / math.sqrt(cfg.L))

    def _gauss(self, out: torch.Tensor) -> DiagGaussian:
        return DiagGaussian(out[:, : self.cz], out[:, self.cz :])

    def prior(self, h_dec: torch.Tensor, u_x: torch.Tensor) -> DiagGaussian:
        u_pool = resize_to(u_x, h_dec.shape[-1])
        return self._gauss(self.prior_net(concat([h_dec, u_pool], axis=1)))

    def posterior(self, h_dec: torch.Tensor, h_enc: torch.Tensor) -> DiagGaussian:
        return self._gauss(self.post_net(h_dec + h_enc))

    def forward(
        self,
        h_dec: torch.Tensor,
        h_enc: torch.Tensor | None,
        u_x: torch.Tensor,
        rng: Rng,
        mode: str = "posterior",
        temperature: float = 1.0,
    ):
        """Returns ``(z, h_dec_new, prior, posterior_or_None)``."""
        p = self.prior(h_dec, u_x)
        if mode == "posterior":
            if h_enc is None:
                raise UsageError("posterior mode needs encoder features")
            q = self.posterior(h_dec, h_enc)
            z = rsample(q, 1.0, rng)
        elif mode == "prior":
            q = None
            z = rsample(p, temperature, rng)
        else:
            raise UsageError(f"unknown mode {mode!r}")
        h_dec = self.out_net(h_dec + self.z_proj(z))
        return z, h_dec, p, q


@dataclass
class ElboReport:
    """Per-datapoint decomposition; ``objective`` is the bound to maximize (nats)."""

    recon: torch.Tensor  # [n] log p(x|z)
    kl: torch.Tensor  # [n, L], column l-1 is layer l
    entropy: torch.Tensor  # scalar, H[r(u|x)]
    diff_L0: torch.Tensor  # [n]
    diff_L1: torch.Tensor  # [n]
    diff_LT: torch.Tensor  # [n]
    objective: torch.Tensor  # [n]

    @property
    def loss(self) -> torch.Tensor:
        return -self.objective.mean()

    @property
    def nll_bound(self) -> torch.Tensor:
        return -self.objective

    def parts(self) -> dict:
        kl = self.kl.detach().mean(0)
        return {
            "recon": float(self.recon.detach().mean()),
            "kl": [float(v) for v in kl],
            "kl_total": float(kl.sum()),
            "entropy": float(self.entropy.detach()),
            "L0": float(self.diff_L0.detach().mean()),
            "L1": float(self.diff_L1.detach().mean()),
            "LT": float(self.diff_LT.detach().mean()),
            "objective": float(self.objective.detach().mean()),
        }


class DVPVAE(nn.Module):
    def __init__(self, cfg: ModelConfig, S: dctlib.NormMatrix | None = None):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.image_channels, cfg.pseudoinput_side
        self.encoder = BottomUp(cfg)
        self.blocks = nn.ModuleList(TopDownBlock(cfg) for _ in range(cfg.L))  # blocks[l-1] owns z_l
        sides = sorted({side for side, _ in cfg.scales})
        self.h_init = nn.ParameterDict(
            {str(side): nn.Parameter(torch.zeros(1, cfg.c_in, side, side)) for side in sides}
        )
        self.agg_side = cfg.scales[0][0]
        if cfg.latent_aggregation:
            self.agg_proj = nn.ModuleList(nn.Conv2d(cfg.latent_channels, cfg.c_in, 1) for _ in range(cfg.L))
        self.head = nn.ModuleList(ResBlock(cfg.c_in, cfg.c_hid) for _ in range(cfg.head_blocks))
        self.head_out = nn.Conv2d(cfg.c_in, c, 3, padding=1)
        self.schedule = DiffusionSchedule(cfg.diffusion_steps, cfg.logsnr_min, cfg.logsnr_max)
        if cfg.use_pseudoinputs:
            self.log_sigma = nn.Parameter(torch.tensor(float(cfg.log_sigma_init)))
            self.prior_net = EpsNet(c, cfg.prior_channels, cfg.prior_blocks)
        self.register_buffer("dct_S", torch.ones(c, d, d) if S is None else S.S.clone().float())
        self.S_digest = "" if S is None else S.digest

    # -- pieces -------------------------------------------------------------

    @property
    def norm_matrix(self) -> dctlib.NormMatrix:
        return dctlib.NormMatrix(self.dct_S, self.cfg.pseudoinput_side, self.S_digest)

    def set_norm_matrix(self, S: dctlib.NormMatrix) -> None:
        self.dct_S.copy_(S.S.to(self.dct_S))
        self.S_digest = S.digest

    def bottom_up(self, x):
        return self.encoder(x)

    def pseudoinput(self, x: torch.Tensor, rng: Rng, noise: bool = True) -> dctlib.PseudoinputPair:
        if not self.cfg.use_pseudoinputs:
            z = x.new_zeros(x.shape[0], self.cfg.image_channels, self.cfg.pseudoinput_side, self.cfg.pseudoinput_side)
            return dctlib.PseudoinputPair(z, torch.zeros_like(x), x.new_tensor(dctlib.LOG_SIGMA_MIN))
        if noise:
            return dctlib.sample_pseudoinput(x, self.norm_matrix, self.cfg.pseudoinput_side, self.log_sigma, rng)
        u = dctlib.f_dct(x, self.norm_matrix, self.cfg.pseudoinput_side)
        return dctlib.PseudoinputPair(u, self.lift(u), self.log_sigma)

    def lift(self, u: torch.Tensor) -> torch.Tensor:
        return dctlib.f_dct_dagger(u, self.norm_matrix, self.cfg.image_side)

    def aggregate_latents(self, zs: list[torch.Tensor]) -> torch.Tensor:
        total = 0
        for z, proj in zip(zs, self.agg_proj):
            total = total + proj(resize_to(z, self.agg_side))
        return total / math.sqrt(len(zs))

    def likelihood_head(self, h: torch.Tensor) -> BernoulliLikelihood:
        for block in self.head:
            h = block(h)
        h = resize_to(F.silu(h), self.cfg.image_side)
        return BernoulliLikelihood(self.head_out(h))

    def top_down(
        self,
        n: int,
        u_x: torch.Tensor,
        rng: Rng,
        feats: dict | None = None,
        posterior_layers: set[int] | None = None,
        temperature: float = 1.0,
    ):
        """Run blocks z_L..z_1. ``posterior_layers`` (1-based) sample from q, others from p."""
        cfg = self.cfg
        sides = cfg.layer_sides
        zs, priors, posts = [None] * cfg.L, [None] * cfg.L, [None] * cfg.L
        h = None
        for l in range(cfg.L, 0, -1):
            side = sides[l - 1]
            if h is None or h.shape[-1] != side:
                init = self.h_init[str(side)].expand(n, -1, -1, -1)
                h = init if h is None else resize_to(h, side) + init
            use_q = posterior_layers is None or l in posterior_layers
            mode = "posterior" if use_q else "prior"
            h_enc = feats[side] if (use_q and feats is not None) else None
            z, h, p, q = self.blocks[l - 1](h, h_enc, u_x, rng, mode, temperature)
            zs[l - 1], priors[l - 1], posts[l - 1] = z, p, q
        return zs, h, priors, posts

    def decode(self, zs, h_dec) -> BernoulliLikelihood:
        if self.cfg.latent_aggregation:
            return self.likelihood_head(self.aggregate_latents(zs))
        return self.likelihood_head(resize_to(h_dec, self.agg_side))

    # -- objective ------------------------------------------------------------

    def forward_train(self, x: torch.Tensor, rng: Rng, diffusion_mode: str = "stochastic") -> ElboReport:
        cfg = self.cfg
        n = x.shape[0]
        pair = self.pseudoinput(x, rng)
        feats = self.bottom_up(x)
        zs, h, priors, posts = self.top_down(n, pair.u_x, rng, feats)
        recon = bernoulli_log_prob(self.decode(zs, h), x)
        kl = torch.stack([per_datapoint(kl_diag_gaussian(q, p)) for q, p in zip(posts, priors)], dim=1)
        if cfg.use_pseudoinputs:
            entropy = gaussian_entropy(dctlib.clamp_log_sigma(self.log_sigma), cfg.pseudoinput_dim)
            terms = l_vlb(self.schedule, pair.u, self.prior_net, rng, diffusion_mode)
            L0, L1, LT = terms.L0, terms.L1, terms.LT
        else:
            entropy = x.new_zeros(())
            L0 = L1 = LT = x.new_zeros(n)
        objective = recon - kl.sum(1) + entropy - (L0 + L1 + LT)
        return ElboReport(recon, kl, entropy, L0, L1, LT, objective)

    def forward(self, x, rng, diffusion_mode="stochastic"):
        return self.forward_train(x, rng, diffusion_mode)

    # -- sampling -------------------------------------------------------------

    @torch.no_grad()
    def sample_pseudoinputs(self, n: int, rng: Rng) -> torch.Tensor:
        cfg = self.cfg
        shape = (cfg.image_channels, cfg.pseudoinput_side, cfg.pseudoinput_side)
        if not cfg.use_pseudoinputs:
            return torch.zeros(n, *shape, dtype=self.dct_S.dtype)
        return sample_prior(self.schedule, n, shape, self.prior_net, rng, dtype=self.dct_S.dtype)

    @torch.no_grad()
    def generate(self, n: int, temperature: float, rng: Rng, u: torch.Tensor | None = None) -> dict:
        if u is None:
            u = self.sample_pseudoinputs(n, rng)
        u_x = self.lift(u) if self.cfg.use_pseudoinputs else torch.zeros(n, self.cfg.image_channels, self.cfg.image_side, self.cfg.image_side, dtype=u.dtype)
        zs, h, _, _ = self.top_down(n, u_x, rng, posterior_layers=set(), temperature=temperature)
        lik = self.decode(zs, h)
        return {"u": u, "u_x": u_x, "mean": lik.mean, "logits": lik.logits}

    @torch.no_grad()
    def generative_reconstruction(
        self, x: torch.Tensor, posterior_scales, temperature: float, rng: Rng
    ) -> BernoulliLikelihood:
        cfg = self.cfg
        known = {side for side, _ in cfg.scales}
        unknown = set(posterior_scales) - known
        if unknown:
            raise UsageError(f"unknown scale(s) {sorted(unknown)}; model scales are {sorted(known)}")
        pair = self.pseudoinput(x, rng)
        feats = self.bottom_up(x)
        layers = {l for l, side in enumerate(cfg.layer_sides, start=1) if side in set(posterior_scales)}
        zs, h, _, _ = self.top_down(x.shape[0], pair.u_x, rng, feats, posterior_layers=layers, temperature=temperature)
        return self.decode(zs, h)

    @torch.no_grad()
    def posterior_means(self, x: torch.Tensor, rng: Rng) -> list[torch.Tensor]:
        """Posterior means of every layer along one ancestral posterior chain."""
        pair = self.pseudoinput(x, rng)
        _, _, _, posts = self.top_down(x.shape[0], pair.u_x, rng, self.bottom_up(x))
        return [q.mu for q in posts]

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"encoder": list(self.encoder.parameters())}
        for i, block in enumerate(self.blocks, start=1):
            groups[f"topdown.{i}"] = list(block.parameters())
        groups["h_init"] = list(self.h_init.parameters())
        if self.cfg.latent_aggregation:
            groups["aggregation"] = list(self.agg_proj.parameters())
        groups["head"] = list(self.head.parameters()) + list(self.head_out.parameters())
        if self.cfg.use_pseudoinputs:
            groups["log_sigma"] = [self.log_sigma]
            groups["diffusion"] = list(self.prior_net.parameters())
        return groups
