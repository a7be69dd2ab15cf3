"""Command-line workflow: synth, train-vae, encode, train-ddm, generate, eval.

Every command prints one JSON summary line on stdout. Exit codes: 0 success,
2 configuration error, 3 I/O or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, FormatError, Normalizer, NumericError, RangeError, ShapeError

log = logging.getLogger("ensemble_ldm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "ENSEMBLE_LDM_THREADS"


# ------------------------------------------------------------------ RunConfig

@dataclass
class SynthSection:
    n_lat: int = 24
    n_lon: int = 48
    members: int = 20
    years: int = 50
    start_year: int = 1950
    trend_total: float = 0.8
    enso_amplitude: float = 1.0
    enso_period: float = 48.0
    noise_std: float = 0.5
    seed: int = 0


@dataclass
class VaeSection:
    f: int = 4
    c: int = 4
    widths: tuple = (16, 32, 64)
    disc_widths: tuple = (16, 32)
    norm_groups: int = 8
    lambda_rec: float = 1.0
    lambda_adv: float = 1e-3
    lambda_kl: float = 1e-4
    lr_schedule: str = "cosine"
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 12
    max_fields: int = 8000
    train_members: str = "2-"
    holdout_members: str = "0-1"
    seed: int = 0


@dataclass
class DdmSection:
    mode: str = "ar"
    window: int = 3
    seq_len: int = 24
    base_width: int = 16
    width_mults: tuple = (1, 2, 2)
    attn_levels: tuple = (False, True, True)
    norm_groups: int = 8
    T: int = 200
    lr: float = 1e-3
    batch: int = 64
    tf_attn_levels: tuple = (False, False, False)
    tf_lr: float = 1e-3
    tf_batch: int = 4
    lr_schedule: str = "cosine"
    epochs: int = 20
    cond_member: int = 0
    train_members: str = "2-"
    train_years: int = 0
    seed: int = 0


@dataclass
class SamplerSection:
    sampler: str = "ddim"
    ddim_steps: int = 50
    members: int = 20
    cond_member: int = 1
    start: int = -1
    length: int = -1
    seed: int = 1


@dataclass
class EvalSection:
    threshold: float = 0.4
    min_months: int = 6
    holdout_members: str = "0-1"


@dataclass
class RunConfig:
    synth: SynthSection = field(default_factory=SynthSection)
    vae: VaeSection = field(default_factory=VaeSection)
    ddm: DdmSection = field(default_factory=DdmSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        from .diffusion import SamplerConfig
        from .nets import UNetConfig
        from .vae import VaeConfig

        self.synth_config()
        VaeConfig(**self.vae_kwargs())
        UNetConfig(**self.unet_kwargs())
        _check(len(self.ddm.tf_attn_levels) == len(self.ddm.width_mults),
               "ddm.tf_attn_levels needs one flag per width_mults level")
        SamplerConfig(self.sampler.sampler, self.ddm.T, self.sampler.ddim_steps, self.sampler.seed)
        _check(self.ddm.epochs >= 1 and self.vae.epochs >= 1, "epochs must be >= 1")
        _check(self.ddm.lr > 0 and self.vae.lr > 0, "learning rates must be > 0")
        _check(self.ddm.tf_lr > 0, "ddm.tf_lr must be > 0")
        _check(min(self.ddm.batch, self.ddm.tf_batch, self.vae.batch) >= 1, "batch sizes must be >= 1")
        _check(self.ddm.train_years >= 0, "ddm.train_years must be >= 0 (0 = all)")
        _check(self.sampler.members >= 1, "sampler.members must be >= 1")
        _check(self.sampler.length == -1 or self.sampler.length >= 1, "sampler.length must be -1 or >= 1")
        _check(self.sampler.start >= -1, "sampler.start must be -1 or >= 0")
        _check(self.eval.min_months >= 1 and self.eval.threshold >= 0, "eval threshold/min_months out of range")
        return self

    def synth_config(self):
        from .synthdata import EnsoConfig, NoiseConfig, SynthConfig

        s = self.synth
        return SynthConfig(
            n_lat=s.n_lat, n_lon=s.n_lon, n_members=s.members, n_years=s.years, start_year=s.start_year,
            trend_total=s.trend_total, seed=s.seed,
            enso=replace(EnsoConfig(), amplitude=s.enso_amplitude, period_months_mean=s.enso_period),
            noise=replace(NoiseConfig(), std=s.noise_std),
        )

    def vae_kwargs(self) -> dict:
        v = self.vae
        return dict(f=v.f, c=v.c, widths=v.widths, disc_widths=v.disc_widths, norm_groups=v.norm_groups,
                    lambda_rec=v.lambda_rec, lambda_adv=v.lambda_adv, lambda_kl=v.lambda_kl, lr=v.lr,
                    batch=v.batch, epochs=v.epochs, seed=v.seed, lr_schedule=v.lr_schedule)

    def unet_kwargs(self, latent_channels: int | None = None) -> dict:
        d = self.ddm
        attn = d.attn_levels if d.mode == "ar" else d.tf_attn_levels
        return dict(latent_channels=latent_channels or self.vae.c, mode=d.mode, window=d.window,
                    seq_len=d.seq_len, base_width=d.base_width, width_mults=d.width_mults,
                    attn_levels=attn, norm_groups=d.norm_groups)

    def ddm_train_config(self):
        from .diffusion import DdmTrainConfig

        d = self.ddm
        # the transformer variant has its own lr and batch (whole sequences)
        lr, batch = (d.lr, d.batch) if d.mode == "ar" else (d.tf_lr, d.tf_batch)
        return DdmTrainConfig(T=d.T, lr=lr, batch=batch, epochs=d.epochs, seed=d.seed, lr_schedule=d.lr_schedule)

    def sampler_config(self):
        from .diffusion import SamplerConfig

        return SamplerConfig(self.sampler.sampler, self.ddm.T, self.sampler.ddim_steps, self.sampler.seed)


def _check(ok: bool, msg: str):
    if not ok:
        raise ConfigError(msg)


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.strip("()[]").split(",") if p.strip()]
            kind = type(default[0]) if default else int
            return tuple(_parse_bool(p) if kind is bool else kind(p) for p in parts)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def load_run_config(path=None) -> RunConfig:
    """Parse a ``key = value`` file with [synth]/[vae]/[ddm]/[sampler]/[eval] sections.

    Unknown sections or keys raise ConfigError naming them.
    """
    cfg = RunConfig()
    if path is None:
        return cfg.validate()
    parser = configparser.ConfigParser(interpolation=None, default_section="\x00")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    for name in parser.sections():
        if name not in {f.name for f in fields(cfg)}:
            raise ConfigError(f"unknown config section [{name}]")
        section = getattr(cfg, name)
        known = {f.name: getattr(section, f.name) for f in fields(section)}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            setattr(section, key, _parse_value(raw, known[key], f"{name}.{key}"))
    return cfg.validate()


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for sec in fields(cfg):
        lines.append(f"[{sec.name}]")
        for k, v in asdict(getattr(cfg, sec.name)).items():
            v = ", ".join(str(x) for x in v) if isinstance(v, tuple) else v
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


# ------------------------------------------------------------------ commands

def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True), flush=True)


def _member_dirs(directory, kind):
    from .pipeline import read_members

    return read_members(directory, kind)


def cmd_synth(args, cfg: RunConfig) -> dict:
    from .dataio import sha256_file
    from .pipeline import write_log_csv
    from .synthdata import generate_ensemble, write_ensemble

    if args.members is not None:
        cfg.synth.members = args.members
    if args.seed is not None:
        cfg.synth.seed = args.seed
    if args.years is not None:
        cfg.synth.years = args.years
    truth = generate_ensemble(cfg.validate().synth_config())
    paths = write_ensemble(truth, args.out)
    rows = [{"member": int(m.member_id), "file": p.name, "sha256": sha256_file(p)}
            for m, p in zip(truth.members, paths)]
    write_log_csv(Path(args.out) / "synth_log.csv", rows)
    return {"command": "synth", "out": str(args.out), "members": len(paths), "months": truth.config.n_months,
            "grid": list(truth.config.grid.shape), "seed": truth.config.seed}


def cmd_train_vae(args, cfg: RunConfig) -> dict:
    from .core import SimSequence
    from .pipeline import parse_ids, reconstruction_rmse, vae_training_fields, write_log_csv
    from .vae import VaeConfig, VaeModel, save_vae, train_vae

    for key in ("epochs", "seed"):
        if getattr(args, key) is not None:
            setattr(cfg.vae, key, getattr(args, key))
    if args.train_members is not None:
        cfg.vae.train_members = args.train_members
    cfg.validate()
    members = _member_dirs(args.data, SimSequence)
    train_ids = parse_ids(cfg.vae.train_members, members)
    hold_ids = [i for i in parse_ids(cfg.vae.holdout_members, members) if i not in train_ids]
    train = [members[i] for i in train_ids]
    norm = Normalizer.fit(train)
    x = vae_training_fields(train, norm, cfg.vae.max_fields, cfg.vae.seed)
    model, _, history = train_vae(x, VaeConfig(**cfg.vae_kwargs()))
    vm = VaeModel(model, norm)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_vae(out, vm, extra={"train_members": train_ids})
    write_log_csv(out.with_suffix(".log.csv"), history)
    summary = {"command": "train-vae", "out": str(out), "epochs": len(history), "train_members": train_ids,
               "final_rec": history[-1]["rec"]}
    if hold_ids:
        rmse, std = reconstruction_rmse(vm, [members[i] for i in hold_ids])
        summary.update(holdout_members=hold_ids, holdout_rmse=rmse, holdout_anomaly_std=std)
    return summary


def cmd_encode(args, cfg: RunConfig) -> dict:
    from .core import SimSequence
    from .dataio import sha256_file, write_cgf
    from .pipeline import write_log_csv
    from .synthdata import member_filename
    from .vae import load_vae

    vm = load_vae(args.vae)
    members = _member_dirs(args.data, SimSequence)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mid, seq in sorted(members.items()):
        lat = vm.encode_seq(seq)
        p = out / member_filename(mid)
        write_cgf(p, lat)
        rows.append({"member": mid, "months": len(lat), "sha256": sha256_file(p)})
    write_log_csv(out / "encode_log.csv", rows)
    return {"command": "encode", "out": str(out), "members": len(rows), "latent_shape": list(lat.latent_shape)}


def cmd_train_ddm(args, cfg: RunConfig) -> dict:
    from .pipeline import parse_ids, write_log_csv
    from .nets import UNetConfig
    from .seqgen import save_ddm, train_ddm
    from .vae import LatentSeq

    for key in ("mode", "epochs", "seed", "cond_member", "train_members", "train_years"):
        if getattr(args, key) is not None:
            setattr(cfg.ddm, key, getattr(args, key))
    cfg.validate()
    latents = _member_dirs(args.latents, LatentSeq)
    if cfg.ddm.cond_member not in latents:
        raise ConfigError(f"conditioning member {cfg.ddm.cond_member} not in {args.latents}")
    train_ids = [i for i in parse_ids(cfg.ddm.train_members, latents) if i != cfg.ddm.cond_member]
    if not train_ids:
        raise ConfigError("no training members left after removing the conditioning member")
    c = latents[cfg.ddm.cond_member].latent_shape[0]
    months = 12 * cfg.ddm.train_years if cfg.ddm.train_years else None
    ddm, history = train_ddm(latents, cfg.ddm.cond_member, train_ids, UNetConfig(**cfg.unet_kwargs(c)),
                             cfg.ddm_train_config(), month_range=(0, months) if months else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ddm(out, ddm)
    write_log_csv(out.with_suffix(".log.csv"), history)
    return {"command": "train-ddm", "out": str(out), "mode": cfg.ddm.mode, "cond_member": cfg.ddm.cond_member,
            "train_members": train_ids, "epochs": len(history), "final_loss": history[-1]["loss"]}


def cmd_generate(args, cfg: RunConfig) -> dict:
    from .pipeline import write_log_csv
    from .seqgen import GenRequest, generate_ensemble, load_ddm
    from .synthdata import member_filename

    for key in ("members", "seed", "cond_member", "start", "length"):
        if getattr(args, key) is not None:
            setattr(cfg.sampler, key, getattr(args, key))
    cfg.validate()
    mode = load_ddm(args.ddm).cfg.mode
    s = cfg.sampler
    req = GenRequest(mode=mode, n_members=s.members, cond_member=s.cond_member,
                     start=None if s.start < 0 else s.start, length=None if s.length < 0 else s.length,
                     sampler=cfg.sampler_config(), seed=s.seed)
    cond_path = Path(args.latents) / member_filename(s.cond_member)
    if not cond_path.exists():
        raise FileNotFoundError(f"conditioning latents {cond_path} not found")
    manifest = generate_ensemble(req, args.vae, args.ddm, cond_path, args.out)
    write_log_csv(Path(args.out) / "generate_log.csv",
                  [{"member": e["id"], "seed": e["seed"], "sha256": e["sha256"]} for e in manifest["members"]])
    return {"command": "generate", "out": str(args.out), "mode": mode, "members": len(manifest["members"]),
            "cond_member": s.cond_member, "sampler_invocations": manifest["config"]["sampler_invocations"]}


def cmd_eval(args, cfg: RunConfig) -> dict:
    from .core import SimSequence
    from .evaluation import compare_ensembles, write_report
    from .pipeline import parse_ids, read_truth, reconstruction_rmse, truth_box_and_volcanoes
    from .vae import load_vae

    orig = _member_dirs(args.orig, SimSequence)
    gen = _member_dirs(args.gen, SimSequence)
    box, volcanoes = truth_box_and_volcanoes(read_truth(args.orig))
    vae_rmse = None
    if args.vae is not None:
        ids = parse_ids(cfg.eval.holdout_members, orig)
        vae_rmse, _ = reconstruction_rmse(load_vae(args.vae), [orig[i] for i in ids])
    report = compare_ensembles(list(orig.values()), list(gen.values()), box, volcanoes,
                               cfg.eval.threshold, cfg.eval.min_months, vae_rmse)
    csv_path, json_path = write_report(report, args.out)
    return {"command": "eval", "out": str(args.out), "mean_rmse": report.mean_rmse,
            "spread_ratio_timemean": report.spread_ratio_timemean,
            "orig_spread_timemean": report.orig_spread_timemean,
            "orig_enso_per50y": report.orig_enso_per50y, "gen_enso_per50y": report.gen_enso_per50y,
            "volcano_dips": report.volcano_dips, "vae_rmse": vae_rmse}


# ------------------------------------------------------------------ parser

def _d(section, key) -> str:
    v = getattr(getattr(RunConfig(), section), key)
    v = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
    return f"(default: {v}, config {section}.{key})"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ensemble-ldm", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads; falls back to ${THREADS_ENV}, then the torch default. "
                        "1 gives bitwise-reproducible results (default: unset)")
    p.add_argument("--log-level", default="WARNING", help="python logging level on stderr (default: WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", default=None, help="RunConfig file (key = value with sections; default: built-in defaults)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "write a synthetic ensemble (member CGF1 files + truth.json)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--members", type=int, default=None, help=f"number of members {_d('synth', 'members')}")
    sp.add_argument("--years", type=int, default=None, help=f"length in years {_d('synth', 'years')}")
    sp.add_argument("--seed", type=int, default=None, help=f"ensemble seed {_d('synth', 'seed')}")

    sp = add("train-vae", cmd_train_vae, "train the VAE on member fields")
    sp.add_argument("--data", required=True, help="directory of member field files")
    sp.add_argument("--out", required=True, help="VAE checkpoint path")
    sp.add_argument("--epochs", type=int, default=None, help=f"training epochs {_d('vae', 'epochs')}")
    sp.add_argument("--train-members", default=None, help=f"member ids {_d('vae', 'train_members')}")
    sp.add_argument("--seed", type=int, default=None, help=f"training seed {_d('vae', 'seed')}")

    sp = add("encode", cmd_encode, "encode member fields to latent files (posterior means)")
    sp.add_argument("--vae", required=True, help="VAE checkpoint")
    sp.add_argument("--data", required=True, help="directory of member field files")
    sp.add_argument("--out", required=True, help="output directory for latent files")

    sp = add("train-ddm", cmd_train_ddm, "train the residual diffusion model on latents")
    sp.add_argument("--latents", required=True, help="directory of latent files")
    sp.add_argument("--out", required=True, help="diffusion checkpoint path")
    sp.add_argument("--mode", choices=["ar", "transformer"], default=None, help=f"denoiser variant {_d('ddm', 'mode')}")
    sp.add_argument("--cond-member", type=int, default=None,
                    help=f"conditioning member for training {_d('ddm', 'cond_member')}")
    sp.add_argument("--train-members", default=None, help=f"member ids {_d('ddm', 'train_members')}")
    sp.add_argument("--train-years", type=int, default=None,
                    help=f"train on the first N years only, 0 = all {_d('ddm', 'train_years')}")
    sp.add_argument("--epochs", type=int, default=None, help=f"training epochs {_d('ddm', 'epochs')}")
    sp.add_argument("--seed", type=int, default=None, help=f"training seed {_d('ddm', 'seed')}")

    sp = add("generate", cmd_generate, "generate ensemble members conditioned on one member")
    sp.add_argument("--vae", required=True, help="VAE checkpoint")
    sp.add_argument("--ddm", required=True, help="diffusion checkpoint (mode is read from it)")
    sp.add_argument("--latents", required=True, help="directory holding the conditioning member's latents")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--cond-member", type=int, default=None,
                    help=f"conditioning member at inference {_d('sampler', 'cond_member')}")
    sp.add_argument("--members", type=int, default=None, help=f"members to generate {_d('sampler', 'members')}")
    sp.add_argument("--start", type=int, default=None,
                    help=f"first generated month index, -1 = auto {_d('sampler', 'start')}")
    sp.add_argument("--length", type=int, default=None,
                    help=f"months to generate, -1 = to the end {_d('sampler', 'length')}")
    sp.add_argument("--seed", type=int, default=None, help=f"generation seed {_d('sampler', 'seed')}")

    sp = add("eval", cmd_eval, "compare generated and original ensembles")
    sp.add_argument("--orig", required=True, help="directory of original member fields (+ truth.json)")
    sp.add_argument("--gen", required=True, help="directory of generated member fields")
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--vae", default=None, help="VAE checkpoint for the reconstruction RMSE (default: none, RMSE skipped)")
    return p


def resolve_threads(cli_value: int | None) -> int | None:
    if cli_value is not None:
        n = cli_value
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}") from None
    else:
        return None
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve_threads(args.threads)
        if threads is not None:
            torch.set_num_threads(threads)
        cfg = load_run_config(args.config)
        summary = args.func(args, cfg)
    except (ConfigError, ShapeError, RangeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit(_jsonable(summary))
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


if __name__ == "__main__":
    sys.exit(main())
