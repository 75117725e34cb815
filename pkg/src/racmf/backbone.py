"""Conditional MeanFlow U-Net: channel-wise image conditioning plus an
interval-time embedding injected into every residual block."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, SpecificationError


@dataclass(frozen=True)
class TimePair:
    """Interval endpoints with 0 <= r <= t <= 1."""

    r: float
    t: float

    def __post_init__(self):
        if not (0.0 <= self.r <= self.t <= 1.0):
            raise SpecificationError(f"need 0 <= r <= t <= 1, got r={self.r}, t={self.t}")


@dataclass(frozen=True)
class BackboneConfig:
    base_width: int = 32
    depth: int = 3
    embed_dim: int = 256
    lambda1: float = 1.0
    r_equals_t_prob: float = 0.5
    learning_rate: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    single_thread: bool = True  # bitwise reproducibility; False allows parallel kernels

    def validate(self) -> None:
        if self.base_width < 8:
            raise SpecificationError(f"base_width must be >= 8, got {self.base_width}")
        if self.depth < 2:
            raise SpecificationError(f"depth must be >= 2, got {self.depth}")
        if self.embed_dim < 4 or self.embed_dim % 2:
            raise SpecificationError(f"embed_dim must be even and >= 4, got {self.embed_dim}")
        if self.lambda1 < 0:
            raise SpecificationError(f"lambda1 must be >= 0, got {self.lambda1}")
        if not 0.0 <= self.r_equals_t_prob <= 1.0:
            raise SpecificationError(
                f"r_equals_t_prob must be in [0, 1], got {self.r_equals_t_prob}")
        if self.steps < 1 or self.batch_size < 1:
            raise SpecificationError("steps and batch_size must be >= 1")


def _sinusoidal_features(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """sin/cos features on a geometric frequency ladder spanning 4 decades.

    The fastest component has period 1 (omega = 2*pi); slower components
    descend to period 1e4. Keeping every frequency resolvable at h = 1e-3
    is required for finite-difference validation of the JVP target.
    """
    exponents = torch.linspace(0.0, -4.0, n_freq, dtype=x.dtype, device=x.device)
    omega = 2.0 * torch.pi * torch.pow(10.0, exponents)
    angles = x[:, None] * omega[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class RTEmbedding(nn.Module):
    """Map (r, t) to a conditioning vector of length embed_dim.

    r and t each get embed_dim/2 sinusoidal frequencies; the concatenation
    plus the scalar (t - r) feeds a 2-layer MLP.
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        if embed_dim < 4 or embed_dim % 2:
            raise SpecificationError(f"embed_dim must be even and >= 4, got {embed_dim}")
        self.embed_dim = embed_dim
        self.n_freq = embed_dim // 2
        in_dim = 2 * (2 * self.n_freq) + 1
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, embed_dim),
            nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
        )

    def forward(self, r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([
            _sinusoidal_features(r, self.n_freq),
            _sinusoidal_features(t, self.n_freq),
            (t - r)[:, None],
        ], dim=-1)
        return self.mlp(feats)


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    """3x3 conv block with an additive per-channel scale-and-shift from c_emb."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, padding_mode="reflect")
        self.film = nn.Linear(embed_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, padding_mode="reflect")
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, c_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(F.silu(c_emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class FlowUNet(nn.Module):
    """u_theta(x_t, x_A, r, t): 2-channel input, encoder-decoder with skips.

    Resolution halves `depth - 1` times; channel width at level L is
    base_width * 2**L. Spatial dims must be divisible by 2**(depth-1).
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        w, depth, emb = config.base_width, config.depth, config.embed_dim
        widths = [w * 2**level for level in range(depth)]
        self.rt_embedding = RTEmbedding(emb)
        self.conv_in = nn.Conv2d(2, widths[0], 3, padding=1, padding_mode="reflect")

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(depth):
            in_ch = widths[max(level - 1, 0)]
            self.enc_blocks.append(ResidualBlock(in_ch, widths[level], emb))
            if level < depth - 1:
                self.downs.append(nn.Conv2d(widths[level], widths[level], 3,
                                            stride=2, padding=1, padding_mode="reflect"))
        self.mid = ResidualBlock(widths[-1], widths[-1], emb)
        self.up_convs = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for level in range(depth - 2, -1, -1):
            self.up_convs.append(nn.Conv2d(widths[level + 1], widths[level], 3, padding=1, padding_mode="reflect"))
            self.dec_blocks.append(ResidualBlock(2 * widths[level], widths[level], emb))
        self.out_norm = _norm(widths[0])
        self.conv_out = nn.Conv2d(widths[0], 1, 3, padding=1, padding_mode="reflect")

    def forward(self, x_t: torch.Tensor, x_A: torch.Tensor,
                r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x_t.shape != x_A.shape:
            raise DimensionError(f"x_t {tuple(x_t.shape)} != x_A {tuple(x_A.shape)}")
        div = 2 ** (self.config.depth - 1)
        if x_t.shape[-1] % div or x_t.shape[-2] % div:
            raise DimensionError(
                f"spatial dims {tuple(x_t.shape[-2:])} must be divisible by {div} "
                f"for depth {self.config.depth}")
        c_emb = self.rt_embedding(r, t)
        h = self.conv_in(torch.cat([x_t, x_A], dim=1))
        skips = []
        for level, block in enumerate(self.enc_blocks):
            h = block(h, c_emb)
            if level < self.config.depth - 1:
                skips.append(h)
                h = self.downs[level](h)
        h = self.mid(h, c_emb)
        for up, block in zip(self.up_convs, self.dec_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), c_emb)
        return self.conv_out(F.silu(self.out_norm(h)))


def rt_embed(net: FlowUNet, r: float, t: float) -> torch.Tensor:
    """Conditioning vector for a single TimePair (validates r <= t)."""
    pair = TimePair(r, t)
    p = next(net.parameters())
    rr = torch.tensor([pair.r], dtype=p.dtype, device=p.device)
    tt = torch.tensor([pair.t], dtype=p.dtype, device=p.device)
    with torch.no_grad():
        return net.rt_embedding(rr, tt)[0]
