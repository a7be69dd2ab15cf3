"""Ensemble statistics and ENSO diagnostics for original vs generated ensembles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import RangeError, SimSequence, annual_mean, lat_weights, monthly_anomaly
from .synthdata import EnsoBox

ENSO_THRESHOLD = 0.4
ENSO_MIN_MONTHS = 6
ENSO_SMOOTH = 5


@dataclass
class EnsembleStats:
    years: np.ndarray
    mean: np.ndarray
    spread: np.ndarray
    annual: np.ndarray          # [member, year]
    member_ids: list

    @property
    def lower(self):
        return self.mean - self.spread

    @property
    def upper(self):
        return self.mean + self.spread


def _check_aligned(members: list[SimSequence]):
    ref = members[0]
    for m in members[1:]:
        if (m.start_year, m.start_month, len(m)) != (ref.start_year, ref.start_month, len(ref)):
            raise RangeError(f"member {m.member_id} time axis ({m.start_year}-{m.start_month}, "
                             f"{len(m)} months) differs from member {ref.member_id}")
        if m.grid != ref.grid:
            raise RangeError(f"member {m.member_id} grid differs from member {ref.member_id}")


def ensemble_stats(members: list[SimSequence], weighted: bool = True) -> EnsembleStats:
    """Mean and sample std (n-1) across members of annual spatial means.

    Members are reduced in sorted member-id order so the result does not
    depend on the order they were passed in.
    """
    if len(members) < 2:
        raise RangeError("ensemble statistics need at least 2 members")
    _check_aligned(members)
    members = sorted(members, key=lambda m: m.member_id)
    rows = []
    for m in members:
        years, vals = annual_mean(m, weighted)
        rows.append(vals)
    annual = np.array(rows, dtype=np.float64)
    return EnsembleStats(years, annual.mean(axis=0), annual.std(axis=0, ddof=1), annual,
                         [m.member_id for m in members])


def running_mean(x, window: int = ENSO_SMOOTH) -> np.ndarray:
    """Centred running mean; the window shrinks symmetrically-clipped at the ends."""
    x = np.asarray(x, dtype=np.float64)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, len(x))
    return (csum[hi] - csum[lo]) / (hi - lo)


def box_mean(values: np.ndarray, grid, box: EnsoBox) -> np.ndarray:
    mask = box.mask(grid)
    if not mask.any():
        raise RangeError(f"ENSO box {box} contains no cells of the grid")
    w = lat_weights(grid.lat)[:, None] * mask
    v = np.asarray(values, dtype=np.float64)
    return (v * w).sum(axis=(-2, -1)) / w.sum()


def enso_index(seq: SimSequence, box: EnsoBox, clim_window: tuple[int, int] | None = None,
               smooth: int = ENSO_SMOOTH) -> np.ndarray:
    """Smoothed area-weighted box-mean monthly anomaly."""
    lo, hi = clim_window if clim_window else (None, None)
    anom = monthly_anomaly(seq, lo, hi)
    raw = box_mean(anom.data, seq.grid, box)
    return running_mean(raw, smooth) if smooth > 1 else raw


def detect_events(index, threshold: float = ENSO_THRESHOLD, min_months: int = ENSO_MIN_MONTHS):
    """Maximal runs above +threshold (sign +1) or below -threshold (sign -1).

    Returns ``(start, end_inclusive, sign)`` tuples sorted by start.
    """
    if threshold <= 0 or min_months < 1:
        raise ValueError("threshold must be > 0 and min_months >= 1")
    x = np.asarray(index, dtype=np.float64)
    state = np.where(x > threshold, 1, np.where(x < -threshold, -1, 0))
    events = []
    if len(state) == 0:
        return events
    edges = np.flatnonzero(np.diff(state)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(state)]]) - 1
    for s, e in zip(starts, ends):
        sign = int(state[s])
        if sign and e - s + 1 >= min_months:
            events.append((int(s), int(e), sign))
    return events


@dataclass
class EnsoSeries:
    index: np.ndarray
    events: list


def enso_series(seq: SimSequence, box: EnsoBox, clim_window=None, threshold=ENSO_THRESHOLD,
                min_months=ENSO_MIN_MONTHS, smooth=ENSO_SMOOTH) -> EnsoSeries:
    idx = enso_index(seq, box, clim_window, smooth)
    return EnsoSeries(idx, detect_events(idx, threshold, min_months))


def local_min_near(values, years, target: int, tol: int = 1) -> bool:
    """True if an interior local minimum lies within ``tol`` years of ``target``."""
    v = np.asarray(values)
    for i in range(1, len(v) - 1):
        if abs(int(years[i]) - target) <= tol and v[i] < v[i - 1] and v[i] < v[i + 1]:
            return True
    return False


def trend_slope(years, values, regressors: dict | None = None) -> float:
    """Least-squares slope per year, optionally with extra regressors held jointly."""
    cols = [np.ones(len(years)), np.asarray(years, dtype=np.float64)]
    for r in (regressors or {}).values():
        cols.append(np.asarray(r, dtype=np.float64))
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), np.asarray(values, dtype=np.float64), rcond=None)
    return float(coef[1])


@dataclass
class EnsembleReport:
    years: list
    orig_mean: list
    orig_spread: list
    gen_mean: list
    gen_spread: list
    orig_min: list
    orig_max: list
    gen_min: list
    gen_max: list
    mean_rmse: float
    spread_ratio: list
    spread_ratio_timemean: float
    orig_spread_timemean: float
    orig_enso_counts: dict
    gen_enso_counts: dict
    orig_enso_per50y: float
    gen_enso_per50y: float
    volcano_dips: dict = field(default_factory=dict)
    vae_rmse: float | None = None

    def series(self) -> dict:
        keys = ("years", "orig_mean", "orig_spread", "gen_mean", "gen_spread", "orig_min",
                "orig_max", "gen_min", "gen_max", "spread_ratio")
        return {k: getattr(self, k) for k in keys}

    def scalars(self) -> dict:
        d = asdict(self)
        for k in self.series():
            d.pop(k)
        return d


def _enso_counts(members, box, threshold, min_months):
    counts, months = {}, 0
    for m in members:
        counts[int(m.member_id)] = len(enso_series(m, box, None, threshold, min_months).events)
        months = len(m)
    per50 = float(np.mean(list(counts.values()))) * 600.0 / months if counts else 0.0
    return counts, per50


def _restrict_years(stats: EnsembleStats, years: np.ndarray) -> EnsembleStats:
    sel = np.isin(stats.years, years)
    return EnsembleStats(stats.years[sel], stats.mean[sel], stats.spread[sel], stats.annual[:, sel],
                         stats.member_ids)


def compare_ensembles(orig: list[SimSequence], gen: list[SimSequence], box: EnsoBox,
                      volcano_years=(), threshold: float = ENSO_THRESHOLD,
                      min_months: int = ENSO_MIN_MONTHS, vae_rmse: float | None = None) -> EnsembleReport:
    """Compare annual mean/spread and ENSO event rates on the years both ensembles cover."""
    so, sg = ensemble_stats(orig), ensemble_stats(gen)
    common = np.intersect1d(so.years, sg.years)
    if len(common) == 0:
        raise RangeError(f"no common years: orig {so.years[0]}-{so.years[-1]}, "
                         f"gen {sg.years[0]}-{sg.years[-1]}")
    if orig[0].grid != gen[0].grid:
        raise RangeError("original and generated grids differ")
    so, sg = _restrict_years(so, common), _restrict_years(sg, common)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(so.spread > 0, sg.spread / so.spread, np.where(sg.spread > 0, np.inf, 1.0))
    osm = float(so.spread.mean())
    ratio_tm = float(sg.spread.mean() / osm) if osm > 0 else (1.0 if sg.spread.mean() == 0 else np.inf)
    oc, o50 = _enso_counts(orig, box, threshold, min_months)
    gc, g50 = _enso_counts(gen, box, threshold, min_months)
    dips = {str(y): local_min_near(sg.mean, common, int(y)) for y in volcano_years
            if common[0] < y < common[-1]}
    return EnsembleReport(
        years=[int(y) for y in common],
        orig_mean=so.mean.tolist(), orig_spread=so.spread.tolist(),
        gen_mean=sg.mean.tolist(), gen_spread=sg.spread.tolist(),
        orig_min=so.annual.min(axis=0).tolist(), orig_max=so.annual.max(axis=0).tolist(),
        gen_min=sg.annual.min(axis=0).tolist(), gen_max=sg.annual.max(axis=0).tolist(),
        mean_rmse=float(np.sqrt(np.mean((so.mean - sg.mean) ** 2))),
        spread_ratio=ratio.tolist(), spread_ratio_timemean=ratio_tm, orig_spread_timemean=osm,
        orig_enso_counts=oc, gen_enso_counts=gc, orig_enso_per50y=o50, gen_enso_per50y=g50,
        volcano_dips=dips, vae_rmse=vae_rmse,
    )


def write_report(report: EnsembleReport, out_dir) -> tuple[Path, Path]:
    from .dataio import write_series_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "series.csv", out / "report.json"
    write_series_csv(csv_path, report.series())
    json_path.write_text(json.dumps(report.scalars(), sort_keys=True, indent=1), encoding="utf-8")
    return csv_path, json_path
