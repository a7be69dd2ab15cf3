"""Train the VAE and the AR denoiser on years 1-35 only, generate years 36-50.

Prints the trend slope of the generated ensemble mean (fitted jointly with the
volcanic forcing shape) against the planted slope, and the volcano dips.

usage: python3 scripts/unseen_period.py OUT_DIR [--train-years 35]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from ensemble_ldm.cli import RunConfig
from ensemble_ldm.evaluation import ensemble_stats, local_min_near, trend_slope
from ensemble_ldm.pipeline import fit_ddm, fit_vae, parse_ids, sample_members
from ensemble_ldm.synthdata import forced_series, generate_ensemble


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-years", type=int, default=35)
    args = ap.parse_args()
    cfg = RunConfig()
    truth = generate_ensemble(cfg.synth_config())
    hist = args.train_years * 12
    ids = parse_ids(cfg.vae.train_members, range(len(truth.members)))
    vm, _ = fit_vae([truth.members[i].slice_months(0, hist) for i in ids], cfg)
    lat = {m.member_id: vm.encode_seq(m) for m in truth.members}
    ddm, _ = fit_ddm(lat, cfg, "ar", month_range=(0, hist))
    n = truth.config.n_months
    gen, _ = sample_members(ddm, vm, lat[cfg.sampler.cond_member], cfg, start=hist, length=n - hist,
                            grid=truth.members[0].grid)
    gen = [m.slice_months(ddm.cfg.window, len(m)) for m in gen]

    stats = ensemble_stats(gen)
    sc = truth.config
    trend = sc.trend_total * np.arange(n) / (n - 1)
    volc = (forced_series(sc) - trend).reshape(-1, 12).mean(axis=1)
    sel = np.isin(np.arange(sc.start_year, sc.start_year + sc.n_years), stats.years)
    out = {
        "years": [int(stats.years[0]), int(stats.years[-1])],
        "slope": trend_slope(stats.years, stats.mean, {"volcanic": volc[sel]}),
        "planted_slope": sc.trend_total / (n - 1) * 12,
        "dips": {v.year: local_min_near(stats.mean, stats.years, v.year) for v in sc.volcanoes
                 if stats.years[0] < v.year < stats.years[-1]},
    }
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "unseen_period.json").write_text(json.dumps(out, indent=1))
    print(json.dumps(out))


if __name__ == "__main__":
    main()
