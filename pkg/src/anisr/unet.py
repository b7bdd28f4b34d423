"""Conditional U-net noise predictor.

Input is the 2-channel stack (noisy target, conditioning image); output is
the predicted noise field at the same spatial size. Timestep and, when
present, the conditioning-noise level share one sinusoidal embedding
pathway (summed before the shared MLP).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# the continuous noise level (0..1) is scaled onto the timestep range before
# sinusoidal embedding so both signals live on comparable scales
TAU_EMBED_SCALE = 1000.0


@dataclass
class NetConfig:
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 4, 8, 8)
    res_blocks: int = 2
    emb_dim: int = 256
    attn_levels: tuple = (3, 4)  # indices into channel_mults, coarsest levels
    groups: int = 8
    in_channels: int = 2
    out_channels: int = 1

    @property
    def depth(self) -> int:
        """Number of downsampling stages."""
        return len(self.channel_mults) - 1

    @property
    def divisor(self) -> int:
        """Spatial dims must be divisible by this (enforced by pad_reflect)."""
        return 2 ** self.depth

    @classmethod
    def tiny(cls) -> "NetConfig":
        return cls(base_channels=8, channel_mults=(1, 2, 4), res_blocks=1,
                   emb_dim=32, attn_levels=(2,), groups=4)

    def to_dict(self) -> dict:
        return dict(base_channels=self.base_channels,
                    channel_mults=list(self.channel_mults),
                    res_blocks=self.res_blocks, emb_dim=self.emb_dim,
                    attn_levels=list(self.attn_levels), groups=self.groups,
                    in_channels=self.in_channels, out_channels=self.out_channels)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        d["attn_levels"] = tuple(d["attn_levels"])
        return cls(**d)


def sinusoidal_embedding(values: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=values.dtype,
                                                        device=values.device) / half)
    args = values[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(groups: int, channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim, groups):
        super().__init__()
        self.norm1 = _norm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = _norm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.norm = _norm(groups, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.scale = channels ** -0.5

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k * self.scale, dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class DenoiserUNet(nn.Module):
    """Encoder-decoder noise predictor with skip connections."""

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        cfg = config or NetConfig()
        self.config = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        emb = cfg.emb_dim

        self.emb_mlp = nn.Sequential(
            nn.Linear(emb, emb * 2), nn.SiLU(), nn.Linear(emb * 2, emb))

        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_chans = [chans[0]]
        c_prev = chans[0]
        for level, c in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(nn.ModuleDict({
                    "res": ResBlock(c_prev, c, emb, cfg.groups),
                    "attn": AttentionBlock(c, cfg.groups)
                    if level in cfg.attn_levels else None,
                }))
                c_prev = c
                skip_chans.append(c)
            self.down_blocks.append(blocks)
            if level < len(chans) - 1:
                self.downsamplers.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
                skip_chans.append(c)

        self.mid1 = ResBlock(c_prev, c_prev, emb, cfg.groups)
        self.mid_attn = AttentionBlock(c_prev, cfg.groups)
        self.mid2 = ResBlock(c_prev, c_prev, emb, cfg.groups)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(len(chans))):
            c = chans[level]
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks + 1):
                blocks.append(nn.ModuleDict({
                    "res": ResBlock(c_prev + skip_chans.pop(), c, emb, cfg.groups),
                    "attn": AttentionBlock(c, cfg.groups)
                    if level in cfg.attn_levels else None,
                }))
                c_prev = c
            self.up_blocks.append(blocks)
            if level > 0:
                self.upsamplers.append(nn.Conv2d(c, c, 3, padding=1))

        self.norm_out = _norm(cfg.groups, chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                tau: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.config
        if x.shape[-1] % cfg.divisor or x.shape[-2] % cfg.divisor:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by {cfg.divisor}; "
                "reflect-pad the input first")
        emb = sinusoidal_embedding(t.to(x.dtype), cfg.emb_dim)
        if tau is not None:
            emb = emb + sinusoidal_embedding(tau.to(x.dtype) * TAU_EMBED_SCALE,
                                             cfg.emb_dim)
        emb = self.emb_mlp(emb)

        h = self.conv_in(x)
        skips = [h]
        for level, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block["res"](h, emb)
                if block["attn"] is not None:
                    h = block["attn"](h)
                skips.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
                skips.append(h)

        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)

        for i, blocks in enumerate(self.up_blocks):
            for block in blocks:
                h = block["res"](torch.cat([h, skips.pop()], dim=1), emb)
                if block["attn"] is not None:
                    h = block["attn"](h)
            if i < len(self.upsamplers):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamplers[i](h)

        return self.conv_out(F.silu(self.norm_out(h)))


class TorchDenoiser:
    """Adapter giving a torch U-net the plain-array denoiser interface."""

    def __init__(self, net: DenoiserUNet, dtype=torch.float32):
        self.net = net
        self.dtype = dtype

    def __call__(self, z_t, cond, t, tau=None):
        self.net.eval()
        with torch.no_grad():
            x = torch.stack([
                torch.as_tensor(np.asarray(z_t), dtype=self.dtype),
                torch.as_tensor(np.asarray(cond), dtype=self.dtype)])[None]
            t_in = torch.tensor([float(t)], dtype=self.dtype)
            tau_in = None if tau is None else torch.tensor([float(tau)], dtype=self.dtype)
            out = self.net(x, t_in, tau_in)
        return out[0, 0].numpy().astype(np.float64)
