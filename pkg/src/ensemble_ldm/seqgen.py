"""Ensemble-member generation in latent space.

Both generators predict residuals against the conditioning member's latents
``z_c`` and add them back before decoding:

* autoregressive: one reverse-diffusion run per month, conditioned on the
  previous ``n`` residuals (time packed into channels) and ``z_c`` at the
  target month;
* transformer: one run per ``seq_len`` block of months, conditioned on the
  block of ``z_c``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, RangeError, ShapeError, SimSequence
from .diffusion import (DdmTrainConfig, GaussianSkip, SamplerConfig, make_schedule, sample,
                        train_denoiser)
from .nets import UNet, UNetConfig, pack_time_channels
from .vae import LatentSeq, VaeModel, load_vae

log = logging.getLogger(__name__)


def member_generator(seed: int, member: int) -> torch.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(member,))
    return torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0]))


def member_seed(seed: int, member: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(member,))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class DdmModel:
    """Trained denoiser plus the scalings between raw latents and network space."""

    unet: UNet
    residual_scale: float = 1.0
    cond_mean: float = 0.0
    cond_scale: float = 1.0
    T: int = 200
    meta: dict = field(default_factory=dict)

    @property
    def cfg(self) -> UNetConfig:
        return self.unet.cfg

    @property
    def denoiser(self) -> GaussianSkip:
        return GaussianSkip(self.unet, make_schedule(self.T))

    def ar_cond(self, window_res: torch.Tensor, zc_win: torch.Tensor) -> torch.Tensor:
        """[B, n, c, h, w] residual window + [B, n+1, c, h, w] z_c over the window and target month.

        z_c over the window lets the net split each residual into own state and conditioning state.
        """
        n = self.cfg.window
        res = pack_time_channels(window_res / self.residual_scale, n)
        zc = pack_time_channels((zc_win - self.cond_mean) / self.cond_scale, n + 1)
        return torch.cat([res, zc], dim=1)

    def seq_cond(self, zc_seq: torch.Tensor) -> torch.Tensor:
        return (zc_seq - self.cond_mean) / self.cond_scale


class ResidualSampler:
    """Draws residual latents from a trained denoiser; counts reverse-process runs."""

    def __init__(self, ddm: DdmModel, cfg: SamplerConfig):
        self.ddm = ddm
        self.cfg = cfg
        self.sched = make_schedule(ddm.T)
        self.denoiser = ddm.denoiser
        self.invocations = 0

    @property
    def window(self) -> int:
        return self.ddm.cfg.window

    @property
    def seq_len(self) -> int:
        return self.ddm.cfg.seq_len

    def _run(self, cond, shape, generators):
        self.invocations += 1
        out = sample(self.denoiser, cond, shape, self.sched, self.cfg, generators)
        return out * self.ddm.residual_scale

    def sample_ar(self, window_res: torch.Tensor, zc_win: torch.Tensor, generators) -> torch.Tensor:
        return self._run(self.ddm.ar_cond(window_res, zc_win), zc_win[:, -1].shape, generators)

    def sample_seq(self, zc_seq: torch.Tensor, generators) -> torch.Tensor:
        return self._run(self.ddm.seq_cond(zc_seq), zc_seq.shape, generators)


class ZeroResidualSampler:
    """Stand-in sampler returning zero residuals (generated member == conditioning member)."""

    def __init__(self, window: int = 3, seq_len: int = 24):
        self.window, self.seq_len, self.invocations = window, seq_len, 0

    def sample_ar(self, window_res, zc_win, generators):
        self.invocations += 1
        return torch.zeros_like(zc_win[:, -1])

    def sample_seq(self, zc_seq, generators):
        self.invocations += 1
        return torch.zeros_like(zc_seq)


@dataclass
class GenRequest:
    mode: str = "ar"
    n_members: int = 4
    cond_member: int = 1
    start: int | None = None        # month offset into the conditioning latents
    length: int | None = None       # months to generate
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("ar", "transformer"):
            raise ConfigError(f"generation mode must be 'ar' or 'transformer', got {self.mode!r}")
        if self.n_members < 0:
            raise ConfigError("n_members must be >= 0")
        if self.length is not None and self.length < 1:
            raise ConfigError("length must be >= 1")


def _member_ids(request: GenRequest) -> list[int]:
    return list(range(request.n_members))


def rollout_autoregressive(sampler, vae: VaeModel | None, zc: LatentSeq, request: GenRequest,
                           init_window: np.ndarray | None = None, grid=None, generators=None):
    """Iterate month by month; returns decoded members (window months included first).

    With ``vae=None`` the latent sequences are returned instead of fields.
    """
    n = sampler.window
    start = n if request.start is None else request.start
    length = len(zc) - start if request.length is None else request.length
    if start < n:
        raise RangeError(f"AR start {start} leaves no room for a {n}-month conditioning window")
    if start + length > len(zc) or length < 1:
        raise RangeError(f"conditioning covers {len(zc)} months, request needs [{start}, {start + length})")
    ids = _member_ids(request)
    if not ids:
        return []
    gens = generators or [member_generator(request.seed, k) for k in ids]
    B = len(ids)
    zc_t = torch.from_numpy(zc.data)
    if init_window is None:
        init_window = zc.data[start - n:start]
    init = torch.from_numpy(np.asarray(init_window, dtype=np.float32))
    if init.shape != (n,) + zc.latent_shape:
        raise ShapeError(f"init window {tuple(init.shape)} != {(n,) + zc.latent_shape}")
    res_window = (init - zc_t[start - n:start]).unsqueeze(0).repeat(B, 1, 1, 1, 1)
    out = torch.empty((B, n + length) + zc.latent_shape)
    out[:, :n] = init
    for k in range(length):
        t = start + k
        zc_win = zc_t[t - n:t + 1].unsqueeze(0).expand(B, -1, -1, -1, -1)
        r = sampler.sample_ar(res_window, zc_win, gens)
        out[:, n + k] = zc_win[:, -1] + r
        res_window = torch.cat([res_window[:, 1:], r.unsqueeze(1)], dim=1)
    first = zc.first_month_index + start - n
    latents = [LatentSeq(out[i].numpy(), first // 12, first % 12 + 1, mid) for i, mid in enumerate(ids)]
    if vae is None:
        return latents
    return [vae.decode_seq(lat, grid) for lat in latents]


def generate_transformer(sampler, vae: VaeModel | None, zc: LatentSeq, request: GenRequest,
                         grid=None, generators=None):
    """Generate in consecutive non-overlapping blocks of ``seq_len`` months."""
    S = sampler.seq_len
    start = 0 if request.start is None else request.start
    length = len(zc) - start if request.length is None else request.length
    if length % S:
        raise ConfigError(f"length {length} is not a multiple of the model sequence length {S}")
    if start < 0 or start + length > len(zc):
        raise RangeError(f"conditioning covers {len(zc)} months, request needs [{start}, {start + length})")
    ids = _member_ids(request)
    if not ids:
        return []
    gens = generators or [member_generator(request.seed, k) for k in ids]
    B = len(ids)
    zc_t = torch.from_numpy(zc.data)
    out = torch.empty((B, length) + zc.latent_shape)
    for w in range(length // S):
        seg = zc_t[start + w * S: start + (w + 1) * S].unsqueeze(0).expand(B, -1, -1, -1, -1)
        out[:, w * S:(w + 1) * S] = seg + sampler.sample_seq(seg, gens)
    first = zc.first_month_index + start
    latents = [LatentSeq(out[i].numpy(), first // 12, first % 12 + 1, mid) for i, mid in enumerate(ids)]
    if vae is None:
        return latents
    return [vae.decode_seq(lat, grid) for lat in latents]


# --------------------------------------------------------------------- training

def _stack(latents: dict, ids, lo, hi) -> np.ndarray:
    return np.stack([latents[i].data[lo:hi] for i in ids])


def ar_training_pairs(latents: dict, cond_id: int, train_ids, window: int, lo: int = 0,
                      hi: int | None = None):
    """Raw (target residual, residual window, z_c window incl. target) arrays for every member/month."""
    zc = latents[cond_id].data
    hi = len(zc) if hi is None else hi
    z = _stack(latents, train_ids, lo, hi)          # [M, L, c, h, w]
    res = z - zc[None, lo:hi]
    L = hi - lo
    targets, windows, conds = [], [], []
    for t in range(window, L):
        targets.append(res[:, t])
        windows.append(res[:, t - window:t])
        conds.append(np.broadcast_to(zc[lo + t - window:lo + t + 1], (len(res),) + (window + 1,) + zc.shape[1:]))
    return (np.concatenate(targets), np.concatenate(windows), np.concatenate(conds))


def train_ddm(latents: dict, cond_id: int, train_ids, unet_cfg: UNetConfig, train_cfg: DdmTrainConfig,
              month_range: tuple[int, int] | None = None, progress=None) -> tuple[DdmModel, list]:
    """Fit a residual denoiser on members ``train_ids`` against conditioning member ``cond_id``."""
    lo, hi = month_range or (0, len(latents[cond_id]))
    shapes = {latents[i].latent_shape for i in list(train_ids) + [cond_id]}
    if len(shapes) != 1:
        raise ConfigError(f"incompatible latent shapes {shapes}")
    if tuple(shapes.pop())[0] != unet_cfg.latent_channels:
        raise ConfigError("latent channel count does not match the denoiser config")
    zc = latents[cond_id].data[lo:hi]
    z_all = _stack(latents, train_ids, lo, hi)
    residual_scale = float((z_all - zc[None]).astype(np.float64).std())
    cond_mean, cond_scale = float(zc.astype(np.float64).mean()), float(zc.astype(np.float64).std())
    torch.manual_seed(train_cfg.seed)
    unet = UNet(unet_cfg)
    ddm = DdmModel(unet, residual_scale, cond_mean, cond_scale, train_cfg.T)

    if unet_cfg.mode == "ar":
        tgt, win, cnd = ar_training_pairs(latents, cond_id, train_ids, unet_cfg.window, lo, hi)
        targets = torch.from_numpy(np.ascontiguousarray(tgt)) / residual_scale
        conds = ddm.ar_cond(torch.from_numpy(np.ascontiguousarray(win)),
                            torch.from_numpy(np.ascontiguousarray(cnd)))
        history = train_denoiser(ddm.denoiser, targets, conds, train_cfg, progress)
    else:
        S = unet_cfg.seq_len
        if hi - lo < S:
            raise RangeError(f"training range of {hi - lo} months shorter than seq_len {S}")
        res = torch.from_numpy(z_all - zc[None]) / residual_scale      # [M, L, ...]
        zc_n = ddm.seq_cond(torch.from_numpy(np.ascontiguousarray(zc)))
        per_member = max(1, (hi - lo) // S)

        def draw(gen):
            starts = torch.randint(0, hi - lo - S + 1, (res.shape[0], per_member), generator=gen)
            tg, cd = [], []
            for m in range(res.shape[0]):
                for s in starts[m].tolist():
                    tg.append(res[m, s:s + S])
                    cd.append(zc_n[s:s + S])
            return torch.stack(tg), torch.stack(cd)

        history = train_denoiser(ddm.denoiser, None, None, train_cfg, progress, sampler_fn=draw)
    ddm.meta = {"cond_member": cond_id, "train_members": [int(i) for i in train_ids],
                "month_range": [lo, hi]}
    return ddm, history


def save_ddm(path, ddm: DdmModel, extra: dict | None = None):
    from .dataio import save_checkpoint

    config = {"kind": "ddm", "unet": ddm.cfg.to_dict(), "residual_scale": ddm.residual_scale,
              "cond_mean": ddm.cond_mean, "cond_scale": ddm.cond_scale, "T": ddm.T, **ddm.meta}
    config.update(extra or {})
    save_checkpoint(path, dict(ddm.unet.state_dict()), config)


def load_ddm(path) -> DdmModel:
    from .core import FormatError
    from .dataio import load_checkpoint

    tensors, config = load_checkpoint(path)
    if config.get("kind") != "ddm":
        raise FormatError(f"{path}: not a diffusion checkpoint (kind={config.get('kind')!r})")
    unet = UNet(UNetConfig.from_dict(config["unet"]))
    unet.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    unet.eval()
    meta = {k: v for k, v in config.items()
            if k not in ("kind", "unet", "residual_scale", "cond_mean", "cond_scale", "T")}
    return DdmModel(unet, config["residual_scale"], config["cond_mean"], config["cond_scale"],
                    config["T"], meta)


def generate_ensemble(request: GenRequest, vae_path, ddm_path, cond_path, out_dir) -> dict:
    """Generate ``request.n_members`` members and write them with a manifest.

    ``cond_path`` is the conditioning member's latent CGF1 file. Returns the manifest.
    """
    from .core import GridSpec
    from .dataio import read_cgf, sha256_file, write_cgf

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vae = load_vae(vae_path)
    ddm = load_ddm(ddm_path)
    if ddm.cfg.mode != request.mode:
        raise ConfigError(f"checkpoint mode {ddm.cfg.mode!r} != requested mode {request.mode!r}")
    zc = read_cgf(cond_path)
    if not isinstance(zc, LatentSeq):
        raise ConfigError(f"{cond_path} is not a latent file")
    c, h, w = zc.latent_shape
    if c != vae.cfg.c or c != ddm.cfg.latent_channels:
        raise ConfigError(f"latent shape {zc.latent_shape} incompatible with checkpoints "
                          f"(vae c={vae.cfg.c}, ddm c={ddm.cfg.latent_channels})")
    grid = GridSpec.regular(h * vae.cfg.f, w * vae.cfg.f)
    sampler = ResidualSampler(ddm, request.sampler)
    if request.mode == "ar":
        members = rollout_autoregressive(sampler, vae, zc, request, grid=grid)
    else:
        members = generate_transformer(sampler, vae, zc, request, grid=grid)
    entries = []
    for k, seq in enumerate(members):
        name = f"member_{k:03d}.cgf"
        write_cgf(out / name, seq)
        entries.append({"id": k, "seed": member_seed(request.seed, k), "file": name,
                        "sha256": sha256_file(out / name)})
    manifest = {
        "members": entries,
        "config": {
            "mode": request.mode, "n_members": request.n_members, "cond_member": request.cond_member,
            "start": request.start, "length": request.length, "seed": request.seed,
            "sampler": vars(request.sampler), "sampler_invocations": sampler.invocations,
            "vae_sha256": sha256_file(vae_path), "ddm_sha256": sha256_file(ddm_path),
            "cond_sha256": sha256_file(cond_path),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    return manifest


def digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
