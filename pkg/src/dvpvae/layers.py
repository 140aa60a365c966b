from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResBlock(nn.Module):
    """SiLU → 3×3 conv → SiLU → 3×3 conv, plus a (projected) skip connection.

    ``emb_dim`` adds a per-channel embedding (e.g. diffusion time) between the
    two convolutions.
    """

    def __init__(
        self,
        c_in: int,
        c_hid: int,
        c_out: int | None = None,
        emb_dim: int | None = None,
        zero_last: bool = False,
        out_scale: float = 1.0,
    ):
        super().__init__()
        c_out = c_in if c_out is None else c_out
        self.conv1 = nn.Conv2d(c_in, c_hid, 3, padding=1)
        self.conv2 = nn.Conv2d(c_hid, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None
        self.emb = nn.Linear(emb_dim, c_hid) if emb_dim else None
        if zero_last:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)
        elif out_scale != 1.0:
            with torch.no_grad():
                for conv in (self.conv2, self.skip):
                    if conv is not None:
                        conv.weight.mul_(out_scale)
                        conv.bias.mul_(out_scale)

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(x))
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        skip = x if self.skip is None else self.skip(x)
        return skip + h


def sinusoidal_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)
