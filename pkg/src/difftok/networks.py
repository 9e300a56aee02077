"""Convolutional encoder, conditional UNet decoder, and latent generator.

All networks are fully convolutional, so a model configured at one resolution
runs unchanged at any other resolution whose sides the downsampling factors
divide. Time is embedded sinusoidally, passed through a two-layer MLP, and
modulates every residual block via a per-block scale-and-shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DomainError, ShapeError

# Variance floor for the latent normalization; small enough that the
# normalized variance sits within 1e-4 of 1 for any healthy encoder output.
LATENT_NORM_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder with downsample factor f = 2**(num_stages - 1)."""

    downsample_factor: int = 4
    latent_channels: int = 4
    base_width: int = 32
    blocks_per_stage: int = 2

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or f & (f - 1):
            raise ConfigurationError(f"downsample_factor must be a power of two >= 2, got {f}")
        if self.latent_channels < 1 or self.base_width < 1 or self.blocks_per_stage < 1:
            raise ConfigurationError("encoder widths and block counts must be positive")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.downsample_factor)) + 1


@dataclass(frozen=True)
class DecoderConfig:
    """UNet decoder: 4 stages of widths (c1, c2, c3, c3), stride-2 between 1-3."""

    channels: tuple[int, int, int] = (32, 64, 128)
    time_embed_dim: int = 256
    blocks_per_stage: int = 3

    def __post_init__(self):
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"channels must be three positive widths, got {self.channels}")
        if self.time_embed_dim < 2 or self.blocks_per_stage < 1:
            raise ConfigurationError("time_embed_dim and blocks_per_stage must be positive")

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        c1, c2, c3 = self.channels
        return (c1, c2, c3, c3)


@dataclass(frozen=True)
class LatentModelConfig:
    """UNet over latents with class conditioning added to the time embedding."""

    channels: tuple[int, ...] = (32, 64)
    time_embed_dim: int = 128
    blocks_per_stage: int = 2
    num_classes: int = 2

    def __post_init__(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"channels must be positive widths, got {self.channels}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")


def _near_zero_init(conv: nn.Conv2d, scale: float = 1e-3) -> None:
    """Shrink the final projection so a fresh model predicts almost zero.

    Exact zeros would cut the gradient path to everything upstream at
    initialization, so a tiny scale is used instead.
    """
    with torch.no_grad():
        conv.weight.mul_(scale)
        conv.bias.zero_()


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of continuous time t in [0, 1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    args = t.reshape(-1, 1) * 1000.0 * freqs.reshape(1, -1)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t, self.dim))


class ResidualBlock(nn.Module):
    """GroupNorm/SiLU/conv block with optional stride-2 and time modulation."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int | None = None, down: bool = False):
        super().__init__()
        self.down = down
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch) if time_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor | None = None) -> torch.Tensor:
        h = F.silu(self.norm1(x))
        if self.down:
            h = F.avg_pool2d(h, 2)
            x = F.avg_pool2d(x, 2)
        h = self.conv1(h)
        h = self.norm2(h)
        if self.time_proj is not None:
            scale, shift = self.time_proj(F.silu(t_emb)).chunk(2, dim=1)
            h = h * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def normalize_latent(z: torch.Tensor) -> torch.Tensor:
    """Per-sample normalization over all latent elements to mean 0, var 1."""
    dims = tuple(range(1, z.ndim))
    mean = z.mean(dim=dims, keepdim=True)
    var = z.var(dim=dims, unbiased=False, keepdim=True)
    return (z - mean) / torch.sqrt(var + LATENT_NORM_EPS)


class Encoder(nn.Module):
    """Stacked residual stages with stride-2 downsampling and a normalized latent."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.num_stages)]
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        stages = []
        ch = widths[0]
        for i, w in enumerate(widths):
            blocks = []
            for _ in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(ch, w))
                ch = w
            if i < len(widths) - 1:
                blocks.append(ResidualBlock(ch, ch, down=True))
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_proj = nn.Conv2d(ch, cfg.latent_channels, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            return self.forward(images[None])[0]
        f = self.cfg.downsample_factor
        h_px, w_px = images.shape[-2:]
        if h_px % f or w_px % f:
            raise ShapeError(
                f"image size {h_px}x{w_px} not divisible by downsample factor {f}; "
                f"resize to a multiple of {f}"
            )
        h = self.stem(images)
        for stage in self.stages:
            for block in stage:
                h = block(h)
        z = self.out_proj(F.silu(self.out_norm(h)))
        return normalize_latent(z)


class CondUNet(nn.Module):
    """Diffusion decoder conditioned on time and a nearest-upsampled latent."""

    def __init__(self, cfg: DecoderConfig, latent_channels: int, upsample_factor: int, out_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.upsample_factor = upsample_factor
        widths = cfg.stage_widths
        self.time_embed = TimeEmbedding(cfg.time_embed_dim)
        self.stem = nn.Conv2d(out_channels + latent_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        ch = widths[0]
        skip_widths = []
        for i, w in enumerate(widths):
            stage = []
            for _ in range(cfg.blocks_per_stage):
                stage.append(ResidualBlock(ch, w, cfg.time_embed_dim))
                ch = w
            skip_widths.append(ch)
            if i < len(widths) - 1:
                stage.append(ResidualBlock(ch, ch, cfg.time_embed_dim, down=True))
            self.down_blocks.append(nn.ModuleList(stage))

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i, w in enumerate(reversed(widths)):
            stage = []
            ch_in = ch + skip_widths.pop()
            for b in range(cfg.blocks_per_stage):
                stage.append(ResidualBlock(ch_in if b == 0 else w, w, cfg.time_embed_dim))
            ch = w
            self.up_blocks.append(nn.ModuleList(stage))
            self.upsamplers.append(Upsample(ch) if i < len(widths) - 1 else nn.Identity())

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_proj = nn.Conv2d(ch, out_channels, 3, padding=1)
        _near_zero_init(self.out_proj)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor | float, z: torch.Tensor) -> torch.Tensor:
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t, z = x_t[None], z[None]
        b, _, h_px, w_px = x_t.shape
        f = self.upsample_factor
        if z.shape[-2] * f != h_px or z.shape[-1] * f != w_px:
            raise ShapeError(
                f"latent {tuple(z.shape[-2:])} x factor {f} does not match image {h_px}x{w_px}"
            )
        if z.shape[1] != self.latent_channels:
            raise ShapeError(f"latent has {z.shape[1]} channels, expected {self.latent_channels}")
        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), float(t), dtype=x_t.dtype)
        elif t.ndim == 0:
            t = t.expand(b).to(x_t.dtype)
        t_emb = self.time_embed(t)

        z_up = F.interpolate(z, scale_factor=f, mode="nearest")
        h = self.stem(torch.cat([x_t, z_up], dim=1))
        skips = []
        for i, stage in enumerate(self.down_blocks):
            n = self.cfg.blocks_per_stage
            for block in stage[:n]:
                h = block(h, t_emb)
            skips.append(h)
            for block in stage[n:]:
                h = block(h, t_emb)
        for stage, up in zip(self.up_blocks, self.upsamplers):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in stage:
                h = block(h, t_emb)
            h = up(h)
        out = self.out_proj(F.silu(self.out_norm(h)))
        return out[0] if squeeze else out


class LatentUNet(nn.Module):
    """Class-conditional diffusion model over latents.

    Class ids live in [0, num_classes); the index num_classes is the null
    token used for classifier-free guidance.
    """

    def __init__(self, cfg: LatentModelConfig, latent_channels: int):
        super().__init__()
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.null_class = cfg.num_classes
        widths = cfg.channels
        self.time_embed = TimeEmbedding(cfg.time_embed_dim)
        self.class_embed = nn.Embedding(cfg.num_classes + 1, cfg.time_embed_dim)
        self.stem = nn.Conv2d(latent_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        ch = widths[0]
        skip_widths = []
        for i, w in enumerate(widths):
            stage = []
            for _ in range(cfg.blocks_per_stage):
                stage.append(ResidualBlock(ch, w, cfg.time_embed_dim))
                ch = w
            skip_widths.append(ch)
            if i < len(widths) - 1:
                stage.append(ResidualBlock(ch, ch, cfg.time_embed_dim, down=True))
            self.down_blocks.append(nn.ModuleList(stage))

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i, w in enumerate(reversed(widths)):
            stage = []
            ch_in = ch + skip_widths.pop()
            for b in range(cfg.blocks_per_stage):
                stage.append(ResidualBlock(ch_in if b == 0 else w, w, cfg.time_embed_dim))
            ch = w
            self.up_blocks.append(nn.ModuleList(stage))
            self.upsamplers.append(Upsample(ch) if i < len(widths) - 1 else nn.Identity())

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_proj = nn.Conv2d(ch, latent_channels, 3, padding=1)
        _near_zero_init(self.out_proj)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor | float, class_ids: torch.Tensor | int) -> torch.Tensor:
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t = z_t[None]
        b = z_t.shape[0]
        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), float(t), dtype=z_t.dtype)
        elif t.ndim == 0:
            t = t.expand(b).to(z_t.dtype)
        if not isinstance(class_ids, torch.Tensor):
            class_ids = torch.full((b,), int(class_ids), dtype=torch.long)
        if bool((class_ids < 0).any()) or bool((class_ids > self.null_class).any()):
            raise DomainError(
                f"class ids must lie in [0, {self.cfg.num_classes}] (null = {self.null_class})"
            )
        emb = self.time_embed(t) + self.class_embed(class_ids)

        h = self.stem(z_t)
        skips = []
        for stage in self.down_blocks:
            n = self.cfg.blocks_per_stage
            for block in stage[:n]:
                h = block(h, emb)
            skips.append(h)
            for block in stage[n:]:
                h = block(h, emb)
        for stage, up in zip(self.up_blocks, self.upsamplers):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in stage:
                h = block(h, emb)
            h = up(h)
        out = self.out_proj(F.silu(self.out_norm(h)))
        return out[0] if squeeze else out


class GanDecoder(nn.Module):
    """Deterministic decoder mirroring the encoder: latent in, image out."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.num_stages)][::-1]
        self.stem = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)
        stages = []
        ch = widths[0]
        for i, w in enumerate(widths):
            blocks = []
            for _ in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(ch, w))
                ch = w
            if i < len(widths) - 1:
                blocks.append(Upsample(ch))
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_proj = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        h = self.stem(z)
        for stage in self.stages:
            for block in stage:
                h = block(h)
        out = self.out_proj(F.silu(self.out_norm(h)))
        return out[0] if squeeze else out


class PatchDiscriminator(nn.Module):
    """Small patch discriminator producing a logits map for the hinge loss."""

    def __init__(self, base_width: int = 32):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def seeded_build(builder, seed: int):
    """Construct a module with the default initializers under a fixed seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return builder()
