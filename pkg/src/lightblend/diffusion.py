"""Pixel-space denoising diffusion: schedule, forward noising, UNet, samplers.

Images live in [-1, 1] model space. The denoiser input is the channel
concatenation of the noisy target x_t (3), the input composite x_a (3),
and the alpha mask m (1). Multiscale conditioning residuals, when given,
are added to the encoder activation of the matching resolution level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

INPUT_CHANNELS = 7  # x_t (3) + x_a (3) + mask (1)


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule; alpha_bar has T+1 entries with alpha_bar[0] = 1."""

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def __post_init__(self):
        T = self.betas.shape[0]
        if self.alpha_bar.shape[0] != T + 1:
            raise ValueError("alpha_bar must have T+1 entries")
        if not torch.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if not torch.all(self.alpha_bar[1:] < self.alpha_bar[:-1]):
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(T: int = 1000, kind: str = "linear") -> NoiseSchedule:
    """Linear betas from 1e-4 to 2e-2 over T steps (T >= 10)."""
    if T < 10:
        raise ValueError(f"T must be >= 10, got {T}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = torch.linspace(1e-4, 2e-2, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(alphas, dim=0)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bar=alpha_bar)


def q_sample(
    x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is an int or a (B,) tensor of ints in [0, T]; t = 0 returns x0
    unchanged (alpha_bar[0] = 1).
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.min() < 0 or t.max() > sched.T:
        raise ValueError(f"t must lie in [0, {sched.T}]")
    ab = sched.alpha_bar[t].to(x0.dtype)
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.device)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb.to(t.device)


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


def zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv twice with a timestep-embedding shift."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    """Shape of the UNet; the conditioning branch mirrors the encoder."""

    size: int = 64
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2, 4)
    blocks_per_level: int = 1
    emb_dim: int = 64
    feature_channels: int = 64  # lighting-feature channels at size / 2^(levels-1)

    def __post_init__(self):
        levels = len(self.channel_mults)
        if levels < 3:
            raise ValueError("need at least 3 resolution levels")
        if self.size % (1 << (levels - 1)):
            raise ValueError(
                f"size {self.size} not divisible by 2^{levels - 1}"
            )

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def feature_size(self) -> int:
        return self.size >> (self.levels - 1)


class UNet(nn.Module):
    """Epsilon-prediction denoiser over the 7-channel conditioned input.

    Encoder activations are recorded per level after that level's blocks;
    conditioning residuals are added there, so they steer both the skip
    connections and everything downstream. The output convolution is
    zero-initialized, making the initial prediction exactly zero.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = config.level_channels
        emb_dim = config.emb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv2d(INPUT_CHANNELS, chans[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_level):
                blocks.append(ResBlock(prev, ch, emb_dim))
                prev = ch
            self.enc_blocks.append(blocks)
            if i < len(chans) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = ResBlock(chans[-1], chans[-1], emb_dim)

        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = chans[-1]
        for i in reversed(range(len(chans))):
            ch = chans[i]
            blocks = nn.ModuleList()
            ins = prev + ch  # skip concat
            for _ in range(config.blocks_per_level):
                blocks.append(ResBlock(ins, ch, emb_dim))
                ins = ch
            self.dec_blocks.append(blocks)
            prev = ch
            if i > 0:
                self.ups.append(nn.Conv2d(ch, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]
        self.out_norm = _norm(chans[0])
        self.out_conv = zero_init(nn.Conv2d(chans[0], 3, 3, padding=1))
        self.act = nn.SiLU()

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        x_a: torch.Tensor,
        m: torch.Tensor,
        cond_residuals: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        s = self.config.size
        if x_t.shape[-2:] != (s, s) or x_a.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} inputs, got {tuple(x_t.shape)}")
        if m.dim() == 3:
            m = m.unsqueeze(1)
        if cond_residuals is not None and len(cond_residuals) != self.config.levels:
            raise ValueError(
                f"expected {self.config.levels} residuals, got {len(cond_residuals)}"
            )
        t = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.config.emb_dim).to(x_t.dtype))

        h = self.stem(torch.cat([x_t, x_a, m.to(x_t.dtype)], dim=1))
        skips = []
        for i, blocks in enumerate(self.enc_blocks):
            for blk in blocks:
                h = blk(h, emb)
            if cond_residuals is not None:
                r = cond_residuals[i]
                if r.shape != h.shape:
                    raise ValueError(
                        f"residual {i} shape {tuple(r.shape)} != {tuple(h.shape)}"
                    )
                h = h + r
            skips.append(h)
            if i < len(self.enc_blocks) - 1:
                h = self.downs[i](h)

        h = self.mid(h, emb)
        for j, blocks in enumerate(self.dec_blocks):
            h = torch.cat([h, skips[len(skips) - 1 - j]], dim=1)
            for blk in blocks:
                h = blk(h, emb)
            if j < len(self.ups):
                h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)
        return self.out_conv(self.act(self.out_norm(h)))


def _sample_times(T: int, steps: int) -> list[int]:
    """Descending subsequence of [1, T] with ``steps`` entries, ending at 1."""
    if steps > T:
        raise ValueError(f"steps {steps} exceeds schedule length {T}")
    ts = torch.linspace(T, 1, steps).round().long().tolist()
    out = []
    for v in ts:  # rounding can collide at small T
        if not out or v < out[-1]:
            out.append(v)
    return out


@torch.no_grad()
def sample(
    model,
    sched: NoiseSchedule,
    x_a: torch.Tensor,
    m: torch.Tensor,
    lighting_features: torch.Tensor | None,
    steps: int = 50,
    seed: int = 0,
    mode: str = "ddim",
    eta: float | None = None,
) -> torch.Tensor:
    """Reverse diffusion from pure noise; returns images in [-1, 1].

    ``model`` is called as model(x_t, t, x_a, m, lighting_features) and
    must return the noise estimate. ``mode`` picks eta: "ddim" is the
    deterministic eta=0 update (same seed, same output), "ddpm" is the
    ancestral eta=1 update over the same step subsequence. Raises
    RuntimeError("non-finite activations") if the model emits NaN or inf.
    """
    if mode not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if eta is None:
        eta = 1.0 if mode == "ddpm" else 0.0
    gen = torch.Generator(device="cpu").manual_seed(seed)
    if m.dim() == 3:
        m = m.unsqueeze(1)
    x = torch.randn(
        (x_a.shape[0], 3, x_a.shape[2], x_a.shape[3]), generator=gen, dtype=x_a.dtype
    )
    times = _sample_times(sched.T, steps)
    for idx, t in enumerate(times):
        t_prev = times[idx + 1] if idx + 1 < len(times) else 0
        eps_hat = model(x, torch.full((x.shape[0],), t, dtype=torch.long), x_a, m, lighting_features)
        if not torch.isfinite(eps_hat).all():
            raise RuntimeError("non-finite activations")
        ab_t = float(sched.alpha_bar[t])
        ab_prev = float(sched.alpha_bar[t_prev])
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(
            1.0 - ab_t / ab_prev
        )
        dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
        x = math.sqrt(ab_prev) * x0_hat + dir_coeff * eps_hat
        if eta > 0.0 and t_prev > 0:
            x = x + sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return x.clamp(-1.0, 1.0)
