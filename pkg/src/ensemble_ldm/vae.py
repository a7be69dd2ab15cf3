"""Variational autoencoder with an adversarial patch discriminator.

Objective per batch::

    lambda_rec * L_rec + lambda_adv * L_adv(generator side) + lambda_kl * KL(q(z|x) || N(0, I))

``decoder`` and ``disc`` are kept as distinct names: the decoder maps latents
back to fields, the discriminator scores realism of reconstructions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ConfigError, NumericError, Normalizer, ShapeError, SimSequence
from .nets import ResBlock, group_norm

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0


@dataclass
class VaeConfig:
    f: int = 4
    c: int = 4
    widths: tuple = (32, 64, 64)
    disc_widths: tuple = (16, 32)
    norm_groups: int = 8
    lambda_rec: float = 1.0
    lambda_adv: float = 1e-3
    lambda_kl: float = 1e-4
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    batch: int = 32
    epochs: int = 10
    seed: int = 0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        levels = math.log2(self.f) if self.f > 0 else -1
        if levels != int(levels) or levels < 0:
            raise ConfigError(f"compression factor f={self.f} must be a power of two")
        if len(self.widths) != int(levels) + 1:
            raise ConfigError(f"f={self.f} needs {int(levels) + 1} encoder widths, got {len(self.widths)}")
        if self.lambda_rec <= 0 or self.lambda_adv < 0 or self.lambda_kl < 0:
            raise ConfigError("loss weights must be non-negative with lambda_rec > 0")
        if self.c < 1:
            raise ConfigError("latent channels c must be >= 1")

    def latent_shape(self, n_lat: int, n_lon: int) -> tuple[int, int, int]:
        if n_lat % self.f or n_lon % self.f:
            raise ShapeError(f"grid {n_lat}x{n_lon} not divisible by f={self.f}")
        return (self.c, n_lat // self.f, n_lon // self.f)

    def compression(self, n_lat: int, n_lon: int, in_chans: int = 1) -> float:
        c, h, w = self.latent_shape(n_lat, n_lon)
        return (n_lat * n_lon * in_chans) / (c * h * w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"], d["disc_widths"], d["betas"] = list(self.widths), list(self.disc_widths), list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        for k in ("widths", "disc_widths", "betas"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Posterior:
    """Diagonal Gaussian q(z|x) with an optional drawn sample."""

    mean: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor | None = None

    @property
    def z(self) -> torch.Tensor:
        return self.mean if self.sample is None else self.sample


@dataclass
class LatentSeq:
    """Monthly latents ``data[time, c, h, w]``."""

    data: np.ndarray
    start_year: int = 1850
    start_month: int = 1
    member_id: int = 0
    logvar: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ShapeError(f"latent sequence must be [time, c, h, w], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("latent sequence contains non-finite values")

    def __len__(self):
        return self.data.shape[0]

    @property
    def latent_shape(self):
        return self.data.shape[1:]

    @property
    def first_month_index(self) -> int:
        return self.start_year * 12 + self.start_month - 1

    def slice_months(self, start: int, stop: int) -> "LatentSeq":
        if not 0 <= start < stop <= len(self):
            from .core import RangeError
            raise RangeError(f"month slice [{start}, {stop}) outside latent sequence of {len(self)}")
        first = self.first_month_index + start
        return LatentSeq(self.data[start:stop], first // 12, first % 12 + 1, self.member_id)


class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig, in_chans: int = 1):
        super().__init__()
        w, g = cfg.widths, cfg.norm_groups
        self.stem = nn.Conv2d(in_chans, w[0], 3, padding=1)
        blocks = []
        for i in range(len(w)):
            blocks.append(ResBlock(w[i], w[i], groups=g))
            if i < len(w) - 1:
                blocks.append(nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1))
        self.blocks = nn.ModuleList(blocks)
        self.norm = group_norm(w[-1], g)
        self.out = nn.Conv2d(w[-1], 2 * cfg.c, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        mean, logvar = self.out(F.silu(self.norm(h))).chunk(2, dim=1)
        return mean, logvar


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig, out_chans: int = 1):
        super().__init__()
        w, g = list(reversed(cfg.widths)), cfg.norm_groups
        self.stem = nn.Conv2d(cfg.c, w[0], 3, padding=1)
        blocks = []
        for i in range(len(w)):
            blocks.append(ResBlock(w[i], w[i], groups=g))
            if i < len(w) - 1:
                blocks.append(nn.Upsample(scale_factor=2, mode="nearest"))
                blocks.append(nn.Conv2d(w[i], w[i + 1], 3, padding=1))
        self.blocks = nn.ModuleList(blocks)
        self.norm = group_norm(w[-1], g)
        self.out = nn.Conv2d(w[-1], out_chans, 3, padding=1)

    def forward(self, z):
        h = self.stem(z)
        for blk in self.blocks:
            h = blk(h)
        return self.out(F.silu(self.norm(h)))


class Discriminator(nn.Module):
    """Three strided convolutions -> one logit per patch."""

    def __init__(self, cfg: VaeConfig, in_chans: int = 1):
        super().__init__()
        d0, d1 = cfg.disc_widths
        self.net = nn.Sequential(
            nn.Conv2d(in_chans, d0, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(d0, d1, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(d1, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class VAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"VAE input must be [B, 1, lat, lon], got {tuple(x.shape)}")
        self.cfg.latent_shape(x.shape[2], x.shape[3])

    def encode(self, x: torch.Tensor, eps: torch.Tensor | None = None,
               generator: torch.Generator | None = None, sample: bool = False) -> Posterior:
        """Posterior of x; ``sample`` (or an explicit ``eps``) draws z = mean + exp(logvar/2) * eps."""
        self._check(x)
        mean, logvar = self.encoder(x)
        if eps is None and sample:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = None if eps is None else mean + torch.exp(0.5 * logvar) * eps
        return Posterior(mean, logvar, z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        c = self.cfg.c
        if z.ndim != 4 or z.shape[1] != c:
            raise ShapeError(f"decoder input must be [B, {c}, h, w], got {tuple(z.shape)}")
        return self.decoder(z)


def loss_rec(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    if x.shape != x_rec.shape:
        raise ShapeError(f"reconstruction shape {tuple(x_rec.shape)} != input {tuple(x.shape)}")
    return ((x - x_rec) ** 2).mean()


def loss_kl(post: Posterior) -> torch.Tensor:
    """Mean over cells of KL(N(mu, sigma^2) || N(0, 1))."""
    return 0.5 * (post.mean ** 2 + post.logvar.exp() - post.logvar - 1.0).mean()


def adv_losses_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """(disc_loss, gen_loss) with D = sigmoid(logit), logits clamped to +-30.

    disc_loss = -[mean log D(x) + mean log(1 - D(x_fake))]; gen_loss = -mean log D(x_fake).
    """
    if real_logits.numel() == 0 or fake_logits.numel() == 0:
        raise ShapeError("adversarial loss needs non-empty batches")
    r = real_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    f = fake_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    # -log sigmoid(a) = softplus(-a), -log(1 - sigmoid(a)) = softplus(a)
    disc = F.softplus(-r).mean() + F.softplus(f).mean()
    gen = F.softplus(-f).mean()
    return disc, gen


def loss_adv(disc: nn.Module, x_real: torch.Tensor, x_fake: torch.Tensor):
    return adv_losses_from_logits(disc(x_real), disc(x_fake))


def loss_total(l_rec, l_adv_gen, l_kl, cfg: VaeConfig):
    return cfg.lambda_rec * l_rec + cfg.lambda_adv * l_adv_gen + cfg.lambda_kl * l_kl


def vae_objective(model: VAE, disc: nn.Module | None, x: torch.Tensor, eps: torch.Tensor | None = None,
                  generator: torch.Generator | None = None) -> dict:
    """All generator-side loss terms for one batch; ``total`` is differentiable."""
    cfg = model.cfg
    post = model.encode(x, eps=eps, generator=generator, sample=eps is None)
    x_rec = model.decode(post.z)
    terms = {"rec": loss_rec(x, x_rec), "kl": loss_kl(post)}
    if disc is not None and cfg.lambda_adv > 0:
        terms["adv_gen"] = F.softplus(-disc(x_rec).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).mean()
    else:
        terms["adv_gen"] = torch.zeros((), dtype=x.dtype)
    terms["total"] = loss_total(terms["rec"], terms["adv_gen"], terms["kl"], cfg)
    terms["x_rec"] = x_rec
    return terms


def train_vae(fields: np.ndarray, cfg: VaeConfig, progress=None):
    """Train on independent normalized fields ``[N, lat, lon]``.

    Time ordering is irrelevant: every epoch shuffles all fields. Generator and
    discriminator updates alternate per batch. Returns ``(model, disc, log)``
    where ``log`` holds per-epoch means of every loss term.
    """
    fields = np.asarray(fields, dtype=np.float32)
    if fields.ndim != 3:
        raise ShapeError(f"training fields must be [N, lat, lon], got {fields.shape}")
    cfg.latent_shape(*fields.shape[1:])
    torch.manual_seed(cfg.seed)
    model, disc = VAE(cfg), Discriminator(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)
    gen = torch.Generator().manual_seed(cfg.seed)
    data = torch.from_numpy(fields)[:, None]
    n = len(data)
    scheds = []
    if cfg.lr_schedule == "cosine":
        # both players decay to zero over the run
        steps = cfg.epochs * -(-n // cfg.batch)
        scheds = [torch.optim.lr_scheduler.CosineAnnealingLR(o, T_max=steps) for o in (opt, opt_d)[:1 + (cfg.lambda_adv > 0)]]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        sums = {"rec": 0.0, "adv_disc": 0.0, "adv_gen": 0.0, "kl": 0.0, "total": 0.0}
        batches = 0
        for i in range(0, n, cfg.batch):
            x = data[perm[i:i + cfg.batch]]
            terms = vae_objective(model, disc, x, generator=gen)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            d_loss = torch.zeros(())
            if cfg.lambda_adv > 0:
                d_loss, _ = loss_adv(disc, x, terms["x_rec"].detach())
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            for sc in scheds:
                sc.step()
            values = {k: terms[k].item() for k in ("rec", "adv_gen", "kl", "total")}
            values["adv_disc"] = d_loss.item()
            if not all(math.isfinite(v) for v in values.values()):
                raise NumericError(f"non-finite VAE loss at epoch {epoch}, batch {i // cfg.batch}, "
                                   f"lr={opt.param_groups[0]['lr']:.3g}: {values}")
            for k, v in values.items():
                sums[k] += v
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        history.append(row)
        log.info("vae epoch %d rec=%.5f kl=%.4f adv_gen=%.4f adv_disc=%.4f",
                 epoch, row["rec"], row["kl"], row["adv_gen"], row["adv_disc"])
        if progress:
            progress(row)
    return model, disc, history


class VaeModel:
    """Frozen VAE plus the field normalizer; works on SimSequence/LatentSeq."""

    def __init__(self, vae: VAE, normalizer: Normalizer, batch: int = 256):
        self.vae = vae.eval()
        self.normalizer = normalizer
        self.batch = batch

    @property
    def cfg(self) -> VaeConfig:
        return self.vae.cfg

    @torch.no_grad()
    def encode_array(self, normed: np.ndarray, sample: bool = False,
                     generator: torch.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        means, logvars = [], []
        for i in range(0, len(normed), self.batch):
            x = torch.from_numpy(np.ascontiguousarray(normed[i:i + self.batch], dtype=np.float32))[:, None]
            post = self.vae.encode(x, sample=sample, generator=generator)
            means.append(post.z.numpy())
            logvars.append(post.logvar.numpy())
        return np.concatenate(means), np.concatenate(logvars)

    @torch.no_grad()
    def decode_array(self, z: np.ndarray) -> np.ndarray:
        out = []
        for i in range(0, len(z), self.batch):
            zz = torch.from_numpy(np.ascontiguousarray(z[i:i + self.batch], dtype=np.float32))
            out.append(self.vae.decode(zz)[:, 0].numpy())
        return np.concatenate(out)

    def encode_seq(self, seq: SimSequence, sample: bool = False, seed: int = 0) -> LatentSeq:
        normed = self.normalizer.normalize(seq.data, seq.calendar_month)
        gen = torch.Generator().manual_seed(seed) if sample else None
        z, lv = self.encode_array(normed, sample, gen)
        return LatentSeq(z, seq.start_year, seq.start_month, seq.member_id, logvar=lv)

    def decode_seq(self, lat: LatentSeq, grid) -> SimSequence:
        normed = self.decode_array(lat.data)
        months = (lat.first_month_index + np.arange(len(lat))) % 12
        seq = SimSequence(grid, self.normalizer.denormalize(normed, months), lat.start_year,
                          lat.start_month, lat.member_id)
        if not np.all(np.isfinite(seq.data)):
            raise NumericError("decoder produced non-finite values")
        return seq

    def reconstruct(self, seq: SimSequence) -> SimSequence:
        return self.decode_seq(self.encode_seq(seq), seq.grid)


def save_vae(path, model: VaeModel | VAE, normalizer: Normalizer | None = None, extra: dict | None = None):
    from .dataio import save_checkpoint

    if isinstance(model, VaeModel):
        normalizer, model = model.normalizer, model.vae
    tensors = {f"vae.{k}": v for k, v in model.state_dict().items()}
    config = {"kind": "vae", "vae": model.cfg.to_dict(), "normalizer": normalizer.to_dict()}
    if np.ndim(normalizer.mean) == 3:
        tensors["normalizer.climatology"] = torch.as_tensor(np.asarray(normalizer.mean))
    config.update(extra or {})
    save_checkpoint(path, tensors, config)


def load_vae(path) -> VaeModel:
    from .core import FormatError
    from .dataio import load_checkpoint

    tensors, config = load_checkpoint(path)
    if config.get("kind") != "vae":
        raise FormatError(f"{path}: not a VAE checkpoint (kind={config.get('kind')!r})")
    cfg = VaeConfig.from_dict(config["vae"])
    vae = VAE(cfg)
    state = {k[4:]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("vae.")}
    vae.load_state_dict(state)
    nd = config["normalizer"]
    if nd["kind"] == "climatology":
        norm = Normalizer(tensors["normalizer.climatology"], nd["std"])
    else:
        norm = Normalizer(nd["mean"], nd["std"])
    return VaeModel(vae, norm)
