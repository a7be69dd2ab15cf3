"""Artifact-level helpers shared by the CLI, the acceptance run and the scripts."""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .core import ConfigError, FormatError, Normalizer, RangeError, SimSequence
from .synthdata import SYNTH_BOX, EnsoBox

MEMBER_GLOB = "member_*.cgf"


def parse_ids(spec: str, available) -> list[int]:
    """``"0,2,5-9"`` style id lists; ``"3-"`` is open-ended, ``"all"`` takes everything."""
    avail = sorted(int(a) for a in available)
    spec = str(spec).strip()
    if spec == "all":
        return avail
    out = []
    for part in filter(None, (p.strip() for p in spec.split(","))):
        m = re.fullmatch(r"(\d+)(?:-(\d*))?", part)
        if not m:
            raise ConfigError(f"bad member id list {spec!r}")
        lo = int(m.group(1))
        if m.group(2) is None:
            hi = lo
        else:
            hi = int(m.group(2)) if m.group(2) else (avail[-1] if avail else lo)
        out.extend(i for i in range(lo, hi + 1) if i in avail or m.group(2) is None)
    missing = sorted(set(out) - set(avail))
    if missing:
        raise ConfigError(f"member id(s) {missing} not available (have {avail})")
    return sorted(set(out))


def read_members(directory, kind=None) -> dict:
    """All ``member_*.cgf`` files of a directory keyed by member id."""
    from .dataio import read_cgf

    paths = sorted(Path(directory).glob(MEMBER_GLOB))
    if not paths:
        raise FileNotFoundError(f"no {MEMBER_GLOB} files in {directory}")
    out = {}
    for p in paths:
        obj = read_cgf(p)
        if kind is not None and not isinstance(obj, kind):
            raise FormatError(f"{p}: expected {kind.__name__}, got {type(obj).__name__}")
        out[int(obj.member_id)] = obj
    return out


def read_truth(directory) -> dict | None:
    p = Path(directory) / "truth.json"
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None


def truth_box_and_volcanoes(truth: dict | None) -> tuple[EnsoBox, list[int]]:
    if truth is None:
        return SYNTH_BOX, []
    cfg = truth["config"]
    return EnsoBox(**cfg["enso"]["box"]), [int(v["year"]) for v in cfg["volcanoes"]]


def vae_training_fields(members: list[SimSequence], norm: Normalizer, max_fields: int,
                        seed: int) -> np.ndarray:
    """Normalized monthly fields pooled over members, subsampled to ``max_fields``."""
    x = np.concatenate([norm.normalize(m.data, m.calendar_month) for m in members])
    if 0 < max_fields < len(x):
        x = x[np.sort(np.random.default_rng(seed).permutation(len(x))[:max_fields])]
    return x.astype(np.float32)


def reconstruction_rmse(vae, members: list[SimSequence]) -> tuple[float, float]:
    """(RMSE of the reconstruction, std of the fields about their calendar-month climatology).

    Both are in degC; the std is the scale the VAE actually has to encode.
    """
    if not members:
        raise RangeError("reconstruction RMSE needs at least one member")
    se, var, n = 0.0, 0.0, 0
    for m in members:
        rec = vae.reconstruct(m).data.astype(np.float64)
        x = m.data.astype(np.float64)
        se += float(((rec - x) ** 2).sum())
        anom = x - np.stack([x[m.calendar_month == k].mean(axis=0) for k in range(12)])[m.calendar_month]
        var += float((anom ** 2).sum())
        n += x.size
    return float(np.sqrt(se / n)), float(np.sqrt(var / n))


def write_log_csv(path, rows: list[dict]):
    """Per-epoch (or per-item) log rows; floats with 9 significant digits."""
    path = Path(path)
    names = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([format(v, ".9g") if isinstance(v, float) else v for v in (r[k] for k in names)])
    return path


# ------------------------------------------------------------------ experiment steps

def fit_vae(members: list[SimSequence], cfg, progress=None):
    """Normalizer + VAE trained on ``members`` with the RunConfig ``vae`` section."""
    from .vae import VaeConfig, VaeModel, train_vae

    norm = Normalizer.fit(members)
    x = vae_training_fields(members, norm, cfg.vae.max_fields, cfg.vae.seed)
    model, _, history = train_vae(x, VaeConfig(**cfg.vae_kwargs()), progress)
    return VaeModel(model, norm), history


def fit_ddm(latents: dict, cfg, mode: str, month_range=None, progress=None):
    """Residual denoiser of ``mode`` trained with the RunConfig ``ddm`` section."""
    from dataclasses import replace

    from .nets import UNetConfig
    from .seqgen import train_ddm

    cfg = replace(cfg, ddm=replace(cfg.ddm, mode=mode))
    train_ids = [i for i in parse_ids(cfg.ddm.train_members, latents) if i != cfg.ddm.cond_member]
    c = latents[cfg.ddm.cond_member].latent_shape[0]
    return train_ddm(latents, cfg.ddm.cond_member, train_ids, UNetConfig(**cfg.unet_kwargs(c)),
                     cfg.ddm_train_config(), month_range, progress)


def sample_members(ddm, vae, zc, cfg, start=None, length=None, grid=None):
    """Generate ``cfg.sampler.members`` decoded members; returns (members, sampler invocations)."""
    from .seqgen import GenRequest, ResidualSampler, generate_transformer, rollout_autoregressive

    s = cfg.sampler
    req = GenRequest(mode=ddm.cfg.mode, n_members=s.members, cond_member=int(zc.member_id), start=start,
                     length=length, sampler=cfg.sampler_config(), seed=s.seed)
    sampler = ResidualSampler(ddm, req.sampler)
    run = rollout_autoregressive if req.mode == "ar" else generate_transformer
    return run(sampler, vae, zc, req, grid=grid), sampler.invocations
