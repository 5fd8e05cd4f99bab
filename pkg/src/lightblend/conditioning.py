"""Lighting representation: feature extractors, conditioning branch, alignment.

A lighting feature is a (C, S/8, S/8) tensor extracted either from the
background crop (F_bg) or from the panorama thumbnail (F_env) by
architecturally identical but separately weighted 4-layer CNNs. The
conditioning branch mirrors the denoiser encoder, consumes the noisy
image plus the lighting feature, and emits one additive residual per
encoder level through zero-initialized projections, so an untrained
branch leaves the denoiser bit-identical. The alignment network maps
f_bg toward f_env with a shape-preserving encoder/decoder around a
zero-initialized global residual, so it starts as the exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffusion import DenoiserConfig, ResBlock, _norm, timestep_embedding, zero_init


@dataclass(frozen=True)
class ExtractorConfig:
    """4-layer CNN reducing an S x S image to an (S/8)^2 feature grid."""

    size: int = 64
    channels: int = 64
    hidden: int = 32

    def __post_init__(self):
        if self.size % 8:
            raise ValueError("input size must be divisible by 8")

    @property
    def feature_size(self) -> int:
        return self.size // 8


class FeatureExtractor(nn.Module):
    """F_bg / F_env: exactly 4 convolutions with stride schedule 2-2-2-1.

    Input is an LDR image in [0, 1], shape (B, 3, S, S); it is mapped to
    [-1, 1] internally. Output is (B, C, S/8, S/8), finite for bounded
    input by construction (convs and SiLU only).
    """

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        h, c = config.hidden, config.channels
        self.net = nn.Sequential(
            nn.Conv2d(3, h, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(h, h * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(h * 2, h * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(h * 2, c, 3, stride=1, padding=1),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        s = self.config.size
        if img.shape[-3:] != (3, s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) input, got {tuple(img.shape)}")
        return self.net(img * 2.0 - 1.0)


class ConditioningBranch(nn.Module):
    """Encoder copy producing per-level additive residuals for the UNet.

    The branch consumes the noisy image x_t and the timestep, with the
    lighting feature injected at the stem through a projection that is
    upsampled to image resolution, so every level's residual depends on
    the feature. Each per-level output projection is zero-initialized.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = config.level_channels
        emb_dim = config.emb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv2d(3, chans[0], 3, padding=1)
        self.feature_proj = nn.Conv2d(config.feature_channels, chans[0], 1)
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.out_projs = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_level):
                blocks.append(ResBlock(prev, ch, emb_dim))
                prev = ch
            self.enc_blocks.append(blocks)
            self.out_projs.append(zero_init(nn.Conv2d(ch, ch, 1)))
            if i < len(chans) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

    def forward(
        self, f: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor
    ) -> list[torch.Tensor]:
        cfg = self.config
        fs = cfg.feature_size
        if f.shape[-3:] != (cfg.feature_channels, fs, fs):
            raise ValueError(
                f"expected feature (B, {cfg.feature_channels}, {fs}, {fs}), "
                f"got {tuple(f.shape)}"
            )
        t = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        emb = self.time_mlp(timestep_embedding(t, cfg.emb_dim).to(x_t.dtype))
        hint = nn.functional.interpolate(
            self.feature_proj(f), scale_factor=1 << (cfg.levels - 1), mode="nearest"
        )
        h = self.stem(x_t) + hint
        residuals = []
        for i, blocks in enumerate(self.enc_blocks):
            for blk in blocks:
                h = blk(h, emb)
            residuals.append(self.out_projs[i](h))
            if i < len(self.enc_blocks) - 1:
                h = self.downs[i](h)
        return residuals


class ConditionedDenoiser(nn.Module):
    """UNet plus branch, callable with the sampler's model interface."""

    def __init__(self, unet: nn.Module, branch: ConditioningBranch):
        super().__init__()
        self.unet = unet
        self.branch = branch

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        x_a: torch.Tensor,
        m: torch.Tensor,
        f: torch.Tensor | None,
    ) -> torch.Tensor:
        residuals = self.branch(f, x_t, t) if f is not None else None
        return self.unet(x_t, t, x_a, m, residuals)


class _PlainResBlock(nn.Module):
    """Residual conv block without a timestep path."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class AlignmentNet(nn.Module):
    """F_bg->env: shape-preserving residual encoder/decoder.

    Encoder: three residual blocks, each followed by a strided-conv 2x
    downsample. Decoder: symmetric, upsampling back to the recorded
    encoder sizes (nearest + conv) with a residual block each. A final
    zero-initialized projection feeds a global residual, out = f + delta,
    so the untrained network is the exact identity.
    """

    N_BLOCKS = 3

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.enc_blocks = nn.ModuleList(_PlainResBlock(channels) for _ in range(self.N_BLOCKS))
        self.downs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, stride=2, padding=1)
            for _ in range(self.N_BLOCKS)
        )
        self.dec_blocks = nn.ModuleList(_PlainResBlock(channels) for _ in range(self.N_BLOCKS))
        self.ups = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(self.N_BLOCKS)
        )
        self.out_proj = zero_init(nn.Conv2d(channels, channels, 1))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-3] != self.channels:
            raise ValueError(
                f"expected {self.channels} feature channels, got {f.shape[-3]}"
            )
        h = f
        sizes = []
        for blk, down in zip(self.enc_blocks, self.downs):
            h = blk(h)
            sizes.append(h.shape[-2:])
            h = down(h)
        for blk, up, size in zip(self.dec_blocks, self.ups, reversed(sizes)):
            h = nn.functional.interpolate(h, size=size, mode="nearest")
            h = blk(up(h))
        return f + self.out_proj(h)


def feature_norm_map(f: torch.Tensor | np.ndarray) -> np.ndarray:
    """Per-cell L2 norm over channels, scaled to [0, 1] for export.

    Accepts (C, h, w) or (B, C, h, w); returns (h, w) or (B, h, w). An
    all-zero feature maps to an all-zero image.
    """
    arr = f.detach().cpu().numpy() if isinstance(f, torch.Tensor) else np.asarray(f)
    norm = np.sqrt(np.sum(arr.astype(np.float64) ** 2, axis=-3))
    peak = norm.max()
    if peak > 0:
        norm = norm / peak
    return norm.astype(np.float32)
