"""Denoiser backbones: residual U-Net with spatial attention ("ar" mode) and the
spatio-temporal transformer U-Net with cascaded temporal patches ("transformer" mode).

Parameters are named ``<stage>.<level>.<block>.<tensor>``, e.g.
``encoder.1.attn.temporal.qkv.weight``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .core import ConfigError, ShapeError


def group_norm(channels: int, groups: int = 8) -> nn.GroupNorm:
    g = min(groups, channels)
    if channels % g:
        raise ConfigError(f"{channels} channels not divisible into {g} norm groups")
    return nn.GroupNorm(g, channels)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard transformer sinusoid of integer positions/steps -> [len(t), dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class StepEmbedding(nn.Module):
    """Sinusoidal diffusion-step embedding followed by a 2-layer MLP."""

    def __init__(self, base: int, out: int):
        super().__init__()
        self.base = base
        self.fc1 = nn.Linear(base, out)
        self.fc2 = nn.Linear(out, out)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        e = sinusoidal_embedding(t, self.base).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(e)))


class ResBlock(nn.Module):
    """Pre-activation residual block: norm -> SiLU -> [resample] -> conv, twice.

    The step embedding (if any) is added between the convs. ``down``/``up``
    resample both the main path and the skip by a factor of 2.
    """

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int | None = None,
                 groups: int = 8, down: bool = False, up: bool = False):
        super().__init__()
        self.down, self.up = down, up
        self.norm1 = group_norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = group_norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def _resample(self, x):
        if self.down:
            return F.avg_pool2d(x, 2)
        if self.up:
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x, emb=None):
        h = self._resample(F.silu(self.norm1(x)))
        h = self.conv1(h)
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        x = self._resample(x)
        if self.skip is not None:
            x = self.skip(x)
        return x + h


def scaled_dot_product_attention(q, k, v, heads: int):
    """softmax(Q K^T / sqrt(d_k)) V per head; heads concatenated (no output mixing).

    ``q``, ``k``, ``v``: [batch, length, width] with ``width % heads == 0``.
    """
    b, n, width = q.shape
    if width % heads:
        raise ConfigError(f"width {width} not divisible by {heads} heads")
    d = width // heads

    def split(x):
        return x.reshape(x.shape[0], x.shape[1], heads, d).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    # torch.softmax subtracts the row max before exponentiating
    w = torch.softmax((qh * (1.0 / math.sqrt(d))) @ kh.transpose(-2, -1), dim=-1)
    out = w @ vh
    return out.transpose(1, 2).reshape(b, n, width)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, pos=None):
        src = x if pos is None else x + pos
        q, k, v = self.qkv(src).chunk(3, dim=-1)
        return self.proj(scaled_dot_product_attention(q, k, v, self.heads))


class SpatialAttention(nn.Module):
    """Residual self-attention over the h*w positions of a [B, C, H, W] map."""

    def __init__(self, width: int, heads: int, groups: int = 8):
        super().__init__()
        self.norm = group_norm(width, groups)
        self.attn = MultiHeadAttention(width, heads)

    def forward(self, x, **_):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        out = self.attn(tokens).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class TransformerBlock(nn.Module):
    """Spatial attention, patched temporal attention, then LN -> Linear -> GELU, all residual.

    Operates on frames folded into the batch: input [B*T, C, H, W] with ``seq_len=T``.
    Temporal attention runs inside non-overlapping windows of ``patch`` steps and
    gets a sinusoidal position of each step within its window.
    """

    def __init__(self, width: int, heads: int, patch: int, temporal: bool = True):
        super().__init__()
        self.patch = patch
        self.temporal_enabled = temporal
        self.norm_s = nn.LayerNorm(width)
        self.spatial = MultiHeadAttention(width, heads)
        self.norm_t = nn.LayerNorm(width)
        self.temporal = MultiHeadAttention(width, heads)
        self.norm_m = nn.LayerNorm(width)
        self.mlp = nn.Linear(width, width)

    def forward(self, x, seq_len: int):
        bt, c, h, w = x.shape
        if bt % seq_len:
            raise ShapeError(f"batch*time {bt} not a multiple of seq_len {seq_len}")
        if seq_len % self.patch:
            raise ConfigError(f"temporal patch {self.patch} does not divide sequence length {seq_len}")
        b = bt // seq_len
        # [B*T, HW, C]
        tok = x.reshape(bt, c, h * w).transpose(1, 2)
        tok = tok + self.spatial(self.norm_s(tok))
        if self.temporal_enabled:
            p = self.patch
            # -> [B, n_patch, p, HW, C] -> [B*n_patch*HW, p, C]
            t5 = tok.reshape(b, seq_len // p, p, h * w, c).permute(0, 1, 3, 2, 4).reshape(-1, p, c)
            pos = sinusoidal_embedding(torch.arange(p), c).to(tok.dtype)[None]
            t5 = t5 + self.temporal(self.norm_t(t5), pos=pos)
            tok = t5.reshape(b, seq_len // p, h * w, p, c).permute(0, 1, 3, 2, 4).reshape(bt, h * w, c)
        tok = tok + F.gelu(self.mlp(self.norm_m(tok)))
        return tok.transpose(1, 2).reshape(bt, c, h, w)


def cascade_plan(seq_len: int, depth: int, max_heads: int = 8) -> list[tuple[int, int]]:
    """Per-level (temporal patch, heads), shallow to deep.

    patch_l = min(seq_len, 4 * 2**l) with the deepest level spanning the whole
    sequence; heads_l = min(max_heads, 2**(l + 1)).
    """
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    if seq_len < 1 or seq_len % (2 ** (depth - 1)):
        raise ConfigError(f"seq_len {seq_len} must be a multiple of 2**(depth-1)={2 ** (depth - 1)}")
    plan = []
    for lvl in range(depth):
        patch = seq_len if lvl == depth - 1 else min(seq_len, 4 * 2 ** lvl)
        if seq_len % patch:
            raise ConfigError(f"level {lvl} patch {patch} does not divide seq_len {seq_len}")
        plan.append((patch, min(max_heads, 2 ** (lvl + 1))))
    return plan


@dataclass
class UNetConfig:
    latent_channels: int = 4
    mode: str = "ar"
    window: int = 3
    seq_len: int = 24
    base_width: int = 32
    width_mults: tuple = (1, 2, 2)
    attn_levels: tuple = (False, True, True)
    norm_groups: int = 8
    emb_width: int | None = None
    bottleneck_temporal: bool = True
    plan: list = field(default=None)

    def __post_init__(self):
        if self.mode not in ("ar", "transformer"):
            raise ConfigError(f"unknown denoiser mode {self.mode!r}")
        if len(self.attn_levels) != len(self.width_mults):
            raise ConfigError("attn_levels must have one flag per level")
        if self.mode == "ar" and self.window < 1:
            raise ConfigError("AR window must be >= 1")
        if self.plan is None:
            self.plan = cascade_plan(self.seq_len if self.mode == "transformer" else 2 ** (self.depth - 1),
                                     self.depth)
        self.plan = [tuple(p) for p in self.plan]
        for w, (_, heads) in zip(self.widths, self.plan):
            if w % heads:
                raise ConfigError(f"width {w} not divisible by {heads} heads")

    @property
    def depth(self) -> int:
        return len(self.width_mults)

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.width_mults]

    @property
    def cond_channels(self) -> int:
        c = self.latent_channels
        return c * (2 * self.window + 1) if self.mode == "ar" else c

    @property
    def in_chans(self) -> int:
        return self.latent_channels + self.cond_channels

    def to_dict(self) -> dict:
        return {"latent_channels": self.latent_channels, "mode": self.mode, "window": self.window,
                "seq_len": self.seq_len, "base_width": self.base_width,
                "width_mults": list(self.width_mults), "attn_levels": list(self.attn_levels),
                "norm_groups": self.norm_groups, "emb_width": self.emb_width,
                "bottleneck_temporal": self.bottleneck_temporal,
                "plan": [list(p) for p in self.plan]}

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["width_mults"] = tuple(d["width_mults"])
        d["attn_levels"] = tuple(d["attn_levels"])
        return cls(**d)


class UNet(nn.Module):
    """Noise predictor eps(z_t, t, cond).

    ar:          z_t [B, c, h, w], cond [B, c*(n+1), h, w] (packed window + z_c)
    transformer: z_t [B, T, c, h, w], cond [B, T, c, h, w]
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        widths = cfg.widths
        emb = cfg.emb_width or 4 * cfg.base_width
        self.step_embed = StepEmbedding(cfg.base_width, emb)
        self.stem = nn.Conv2d(cfg.in_chans, widths[0], 3, padding=1)
        self.encoder = nn.ModuleList()
        ch = widths[0]
        for lvl, w in enumerate(widths):
            stage = nn.ModuleDict({"res": ResBlock(ch, w, emb, g), "attn": self._mixer(lvl, w)})
            if lvl < cfg.depth - 1:
                stage["down"] = ResBlock(w, w, emb, g, down=True)
            self.encoder.append(stage)
            ch = w
        last = cfg.depth - 1
        self.middle = nn.ModuleDict({
            "res1": ResBlock(ch, ch, emb, g),
            "attn": self._mixer(last, ch),
            "res2": ResBlock(ch, ch, emb, g),
        })
        self.decoder = nn.ModuleList()
        for lvl in range(cfg.depth):
            w = widths[lvl]
            stage = nn.ModuleDict({"res": ResBlock(2 * w, w, emb, g),
                                   "attn": self._mixer(lvl, w)})
            if lvl > 0:
                stage["up"] = ResBlock(w, widths[lvl - 1], emb, g, up=True)
            self.decoder.append(stage)
        self.head = nn.ModuleDict({"norm": group_norm(widths[0], g),
                                   "conv": nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)})
        nn.init.zeros_(self.head["conv"].weight)
        nn.init.zeros_(self.head["conv"].bias)

    def _mixer(self, lvl: int, width: int) -> nn.Module:
        cfg = self.cfg
        patch, heads = cfg.plan[lvl]
        if cfg.mode == "transformer":
            temporal = cfg.bottleneck_temporal or lvl != cfg.depth - 1
            return TransformerBlock(width, heads, patch, temporal)
        if cfg.attn_levels[lvl]:
            return SpatialAttention(width, heads, cfg.norm_groups)
        return nn.Identity()

    def _mix(self, block, h, seq_len):
        if isinstance(block, TransformerBlock):
            return block(h, seq_len)
        return block(h)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        c = cfg.latent_channels
        if cfg.mode == "ar":
            if z_t.ndim != 4 or z_t.shape[1] != c or cond.shape[1] != cfg.cond_channels:
                raise ShapeError(f"stem: ar input z_t {tuple(z_t.shape)} / cond {tuple(cond.shape)} "
                                 f"expected [B,{c},h,w] / [B,{cfg.cond_channels},h,w]")
            x = torch.cat([z_t, cond], dim=1)
            seq_len = 1
        else:
            if z_t.ndim != 5 or z_t.shape[2] != c or cond.shape != z_t.shape:
                raise ShapeError(f"stem: transformer input z_t {tuple(z_t.shape)} / cond "
                                 f"{tuple(cond.shape)} expected matching [B,T,{c},h,w]")
            seq_len = z_t.shape[1]
            x = torch.cat([z_t, cond], dim=2).flatten(0, 1)
        b, _, h, w = x.shape
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        emb = self.step_embed(t)
        if seq_len > 1:
            emb = emb.repeat_interleave(seq_len, dim=0)
        m = 2 ** (cfg.depth - 1)
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))

        hid = self.stem(x)
        skips = []
        for stage in self.encoder:
            hid = stage["res"](hid, emb)
            hid = self._mix(stage["attn"], hid, seq_len)
            skips.append(hid)
            if "down" in stage:
                hid = stage["down"](hid, emb)
        hid = self.middle["res1"](hid, emb)
        hid = self._mix(self.middle["attn"], hid, seq_len)
        hid = self.middle["res2"](hid, emb)
        for lvl in reversed(range(cfg.depth)):
            stage = self.decoder[lvl]
            hid = stage["res"](torch.cat([hid, skips.pop()], dim=1), emb)
            hid = self._mix(stage["attn"], hid, seq_len)
            if "up" in stage:
                hid = stage["up"](hid, emb)
        out = self.head["conv"](F.silu(self.head["norm"](hid)))
        out = out[:, :, :h, :w]
        if cfg.mode == "transformer":
            out = out.reshape(z_t.shape)
        return out


def pack_time_channels(window, n: int | None = None) -> torch.Tensor:
    """Stack n latents [.., c, h, w] along channels in time order -> [.., n*c, h, w].

    ``window`` is a sequence of latents or a tensor [.., n, c, h, w].
    """
    length = window.shape[-4] if isinstance(window, torch.Tensor) else len(window)
    if n is not None and length != n:
        raise ShapeError(f"window has {length} steps, expected {n}")
    if isinstance(window, torch.Tensor):
        return window.flatten(-4, -3)
    return torch.cat(list(window), dim=-3)


def unpack_time_channels(packed: torch.Tensor, n: int) -> torch.Tensor:
    """Inverse of :func:`pack_time_channels` -> [.., n, c, h, w]."""
    if packed.shape[-3] % n:
        raise ShapeError(f"{packed.shape[-3]} channels cannot split into window of {n}")
    c = packed.shape[-3] // n
    return packed.reshape(*packed.shape[:-3], n, c, *packed.shape[-2:])


def parameter_manifest(model: nn.Module) -> list[tuple[str, tuple]]:
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]
