"""Noise schedules, forward noising, epsilon-prediction loss and reverse samplers.

Step indices are zero-based: ``t`` in ``[0, T)``, ``alpha_bar[t] = prod_{s<=t} (1 - beta[s])``.
A DDIM target index of ``-1`` stands for the clean sample (alpha_bar = 1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import ConfigError, NumericError, RangeError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 2:
            raise ConfigError("schedule needs at least 2 steps")
        if np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) < 0):
            raise ConfigError("betas must lie in (0, 1) and be non-decreasing")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def abar(self, t: int) -> float:
        return 1.0 if t < 0 else float(self.alpha_bar[t])

    def check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise RangeError(f"diffusion step {t} outside [0, {self.T})")


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Linear betas 1e-4 -> 0.02 rescaled by 1000/T, clipped below 0.999."""
    if T < 2:
        raise ConfigError(f"diffusion needs T >= 2, got {T}")
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    scale = 1000.0 / T
    betas = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    return NoiseSchedule(np.clip(betas, 1e-12, 0.999))


def _bcast(values, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(values, dtype=like.dtype)
    return v.reshape(-1, *([1] * (like.ndim - 1))) if v.ndim else v


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` scalar or per-sample."""
    sched.check(t)
    ab = sched.alpha_bar[np.asarray(t)]
    return _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * eps


@dataclass
class DiffusionBatch:
    z0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    z_t: torch.Tensor

    @classmethod
    def draw(cls, z0: torch.Tensor, sched: NoiseSchedule, generator: torch.Generator | None = None):
        t = torch.randint(0, sched.T, (z0.shape[0],), generator=generator)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        return cls(z0, t, eps, q_sample(z0, t.numpy(), eps, sched))


def ddpm_loss(model, batch: DiffusionBatch, cond: torch.Tensor | None) -> torch.Tensor:
    """Mean squared error between the drawn and the predicted noise."""
    pred = model(batch.z_t, batch.t, cond)
    if pred.shape != batch.eps.shape:
        raise ShapeError(f"model output {tuple(pred.shape)} != noise shape {tuple(batch.eps.shape)}")
    if not torch.isfinite(pred).all():
        raise NumericError(f"non-finite model output at steps {batch.t.tolist()}")
    return ((batch.eps - pred) ** 2).mean()


def randn_per_member(shape, generators, dtype=torch.float32) -> torch.Tensor:
    """Gaussian draw whose row ``i`` comes only from ``generators[i]``."""
    if generators is None:
        return torch.randn(shape, dtype=dtype)
    if len(generators) != shape[0]:
        raise ShapeError(f"{len(generators)} generators for batch of {shape[0]}")
    return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in generators])


def _eps(model, z_t, t, cond):
    tt = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
    out = model(z_t, tt, cond)
    if not torch.isfinite(out).all():
        raise NumericError(f"non-finite noise prediction at step {t}")
    return out


def ddpm_step(model, z_t: torch.Tensor, t: int, cond, sched: NoiseSchedule,
              generators=None, noise: bool = True) -> torch.Tensor:
    """Ancestral step with sigma_t^2 = beta_t; no noise is added at t = 0."""
    sched.check(t)
    beta, alpha, ab = sched.betas[t], sched.alphas[t], sched.alpha_bar[t]
    eps = _eps(model, z_t, t, cond)
    mean = (z_t - (beta / math.sqrt(1.0 - ab)) * eps) / math.sqrt(alpha)
    if t > 0 and noise:
        mean = mean + math.sqrt(beta) * randn_per_member(z_t.shape, generators, z_t.dtype)
    if not torch.isfinite(mean).all():
        raise NumericError(f"non-finite DDPM state at step {t}")
    return mean


def ddim_step(model, z_t: torch.Tensor, t: int, t_prev: int, cond, sched: NoiseSchedule,
              eps: torch.Tensor | None = None) -> torch.Tensor:
    """Deterministic (eta = 0) jump from step ``t`` to ``t_prev`` (``-1`` = clean)."""
    sched.check(t)
    if t_prev > t or t_prev < -1:
        raise ConfigError(f"DDIM step pair ({t} -> {t_prev}) must satisfy -1 <= t_prev <= t")
    if t_prev == t:
        return z_t
    ab, ab_prev = sched.abar(t), sched.abar(t_prev)
    if eps is None:
        eps = _eps(model, z_t, t, cond)
    z0_hat = (z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    out = math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps
    if not torch.isfinite(out).all():
        raise NumericError(f"non-finite DDIM state at step {t}")
    return out


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Evenly strided descending steps from T-1 down to 0."""
    if n_steps < 1:
        raise ConfigError("ddim_steps must be >= 1")
    n = min(n_steps, T)
    return sorted({int(round(x)) for x in np.linspace(0, T - 1, n)}, reverse=True)


@dataclass
class SamplerConfig:
    sampler: str = "ddim"
    T: int = 200
    ddim_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.sampler not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler must be 'ddpm' or 'ddim', got {self.sampler!r}")
        if self.T < 2 or self.ddim_steps < 1:
            raise ConfigError("sampler needs T >= 2 and ddim_steps >= 1")


@torch.no_grad()
def sample(model, cond, shape, sched: NoiseSchedule, cfg: SamplerConfig, generators=None,
           trajectory: list | None = None) -> torch.Tensor:
    """Run the reverse process from pure noise at step T-1 and return the clean sample.

    Row ``i`` of the initial noise (and of any DDPM noise) is drawn from
    ``generators[i]``, so batch composition does not change a member's draw.
    """
    cond_before = None if cond is None else cond.clone()
    z = randn_per_member(shape, generators)
    if trajectory is not None:
        trajectory.append(z)
    if cfg.sampler == "ddpm":
        for t in range(sched.T - 1, -1, -1):
            z = ddpm_step(model, z, t, cond, sched, generators)
            if trajectory is not None:
                trajectory.append(z)
    else:
        steps = ddim_timesteps(sched.T, cfg.ddim_steps)
        for t, t_prev in zip(steps, steps[1:] + [-1]):
            z = ddim_step(model, z, t, t_prev, cond, sched)
            if trajectory is not None:
                trajectory.append(z)
    if cond is not None and not torch.equal(cond, cond_before):
        raise RuntimeError("sampler mutated the conditioning tensor")
    return z


class GaussianSkip(torch.nn.Module):
    """eps(z_t, t, cond) = net(z_t, t, cond) + sqrt(1 - abar_t) * z_t.

    The skip term is the exact noise predictor for unit-variance Gaussian data,
    so a zero-initialised ``net`` starts as that predictor and only learns the
    correction. Without it the error of an undertrained net at large ``t`` is
    amplified by 1/sqrt(abar_t) in the clean estimate and deterministic DDIM
    trajectories come out over-dispersed.
    """

    def __init__(self, net: torch.nn.Module, sched: NoiseSchedule):
        super().__init__()
        self.net = net
        self.register_buffer("coef", torch.as_tensor(np.sqrt(1.0 - sched.alpha_bar), dtype=torch.float32),
                             persistent=False)

    def forward(self, z_t, t, cond):
        c = self.coef.to(z_t.dtype)[t].reshape(-1, *([1] * (z_t.ndim - 1)))
        return self.net(z_t, t, cond) + c * z_t


def residualize(z, z_c):
    if z.shape != z_c.shape:
        raise ShapeError(f"latent shape {tuple(z.shape)} != conditioning shape {tuple(z_c.shape)}")
    return z - z_c


def deresidualize(z_y, z_c):
    if z_y.shape != z_c.shape:
        raise ShapeError(f"residual shape {tuple(z_y.shape)} != conditioning shape {tuple(z_c.shape)}")
    return z_y + z_c


@dataclass
class DdmTrainConfig:
    T: int = 200
    lr: float = 2e-4
    batch: int = 64
    epochs: int = 10
    seed: int = 0
    grad_clip: float = 1.0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


def _batches_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def train_denoiser(model, targets: torch.Tensor, conds: torch.Tensor, cfg: DdmTrainConfig,
                   progress=None, sampler_fn=None):
    """Minimise the epsilon-prediction loss over (target, cond) pairs.

    ``sampler_fn(epoch_generator) -> (targets, conds)`` may replace the fixed
    tensors to draw fresh training windows each epoch.
    Returns per-epoch mean losses.
    """
    sched = make_schedule(cfg.T)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    lr_sched = None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        if sampler_fn is not None:
            targets, conds = sampler_fn(gen)
        if lr_sched is None and cfg.lr_schedule == "cosine":
            # decays to zero over the whole run; drawn windows keep a fixed count per epoch
            total_steps = cfg.epochs * _batches_per_epoch(len(targets), cfg.batch)
            lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
        perm = torch.randperm(len(targets), generator=gen)
        total, batches = 0.0, 0
        model.train()
        for i in range(0, len(targets), cfg.batch):
            idx = perm[i:i + cfg.batch]
            batch = DiffusionBatch.draw(targets[idx], sched, gen)
            loss = ddpm_loss(model, batch, conds[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite diffusion loss at epoch {epoch}, batch {batches}, "
                                   f"lr={opt.param_groups[0]['lr']:.3g}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if lr_sched is not None:
                lr_sched.step()
            total += loss.item()
            batches += 1
        row = {"epoch": epoch, "loss": total / batches, "lr": opt.param_groups[0]["lr"]}
        history.append(row)
        log.info("ddm epoch %d loss=%.5f", epoch, row["loss"])
        if progress:
            progress(row)
    model.eval()
    return history
