"""Synthetic "toy earth" grand ensemble with a known forced response.

Member ``m`` at month ``t``::

    T = clim(lat, month) + trend(t) + volcanic(t) + enso_m(t) * pattern(lat, lon) + noise_m(lat, lon, t)

``trend`` and ``volcanic`` are shared by all members. ``enso_m`` is an AR(2)
process with complex poles and ``noise_m`` is box-blurred white noise. Each
member draws from its own RNG stream keyed on ``(seed, member)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .core import ConfigError, GridSpec, SimSequence, lat_weights

ENSO_POLE_RADIUS = 0.98
_SPINUP_MONTHS = 240


@dataclass(frozen=True)
class VolcanoEvent:
    year: int
    peak_cooling: float
    efold_months: float = 24.0


@dataclass(frozen=True)
class EnsoBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def mask(self, grid: GridSpec) -> np.ndarray:
        la = (grid.lat >= self.lat_min) & (grid.lat <= self.lat_max)
        lo = (grid.lon >= self.lon_min) & (grid.lon <= self.lon_max)
        return la[:, None] & lo[None, :]


NINO34_BOX = EnsoBox(-5.0, 5.0, 190.0, 240.0)
SYNTH_BOX = EnsoBox(-15.0, 15.0, 180.0, 270.0)


@dataclass(frozen=True)
class EnsoConfig:
    period_months_mean: float = 48.0
    period_jitter: float = 0.1
    amplitude: float = 1.0
    box: EnsoBox = SYNTH_BOX


@dataclass(frozen=True)
class NoiseConfig:
    std: float = 0.5
    spatial_corr_length: int = 3


DEFAULT_VOLCANOES = (
    VolcanoEvent(1963, 0.5),
    VolcanoEvent(1982, 0.4),
    VolcanoEvent(1991, 0.6),
)


@dataclass(frozen=True)
class SynthConfig:
    n_lat: int = 24
    n_lon: int = 48
    n_members: int = 20
    n_years: int = 50
    start_year: int = 1950
    base_temp: float = 14.0
    meridional_amplitude: float = 30.0
    seasonal_amplitude: float = 8.0
    trend_total: float = 0.8
    volcanoes: tuple = DEFAULT_VOLCANOES
    enso: EnsoConfig = field(default_factory=EnsoConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    def __post_init__(self):
        amps = [self.meridional_amplitude, self.seasonal_amplitude, self.enso.amplitude,
                self.noise.std, self.enso.period_jitter]
        if any(a < 0 for a in amps):
            raise ConfigError("synth amplitudes must be >= 0")
        if self.n_members < 2:
            raise ConfigError("n_members must be >= 2")
        if self.n_years < 1:
            raise ConfigError("n_years must be >= 1")
        if self.enso.period_months_mean <= 2:
            raise ConfigError("ENSO period must exceed 2 months")
        if self.noise.spatial_corr_length < 1:
            raise ConfigError("noise correlation length must be >= 1 cell")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not self.enso.box.mask(self.grid).any():
            raise ConfigError("ENSO box contains no grid cells")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.regular(self.n_lat, self.n_lon)

    @property
    def n_months(self) -> int:
        return 12 * self.n_years

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthTruth:
    config: SynthConfig
    members: list[SimSequence]
    forced: np.ndarray          # [month] trend + volcanic, degC
    enso: np.ndarray            # [member, month] planted ENSO amplitude, degC
    climatology: np.ndarray     # [12, lat, lon]
    enso_pattern: np.ndarray    # [lat, lon]

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "start_year": self.config.start_year,
            "start_month": 1,
            "forced": [float(v) for v in self.forced],
            "enso": {str(m.member_id): [float(v) for v in self.enso[i]]
                     for i, m in enumerate(self.members)},
        }


def climatology(cfg: SynthConfig) -> np.ndarray:
    g = cfg.grid
    slat = np.sin(np.deg2rad(g.lat))
    merid = cfg.base_temp + cfg.meridional_amplitude * (1.0 / 3.0 - slat ** 2)
    # peak northern summer in July (index 6)
    phase = np.cos(2 * np.pi * (np.arange(12) - 6) / 12.0)
    field_ = merid[None, :] + cfg.seasonal_amplitude * phase[:, None] * slat[None, :]
    return np.repeat(field_[:, :, None], g.n_lon, axis=2)


def forced_series(cfg: SynthConfig) -> np.ndarray:
    n = cfg.n_months
    t = np.arange(n, dtype=np.float64)
    trend = cfg.trend_total * t / max(n - 1, 1)
    volc = np.zeros(n)
    for ev in cfg.volcanoes:
        t0 = (ev.year - cfg.start_year) * 12
        if t0 >= n:
            continue
        after = t >= t0
        volc[after] -= ev.peak_cooling * np.exp(-(t[after] - t0) / ev.efold_months)
    return trend + volc


def enso_pattern(cfg: SynthConfig) -> np.ndarray:
    """Gaussian bump on the box, scaled so its area-weighted box mean is 1."""
    g, box = cfg.grid, cfg.enso.box
    lat0, lon0 = (box.lat_min + box.lat_max) / 2, (box.lon_min + box.lon_max) / 2
    slat, slon = (box.lat_max - box.lat_min) / 2, (box.lon_max - box.lon_min) / 2
    bump = np.exp(-((g.lat[:, None] - lat0) / slat) ** 2 - ((g.lon[None, :] - lon0) / slon) ** 2)
    mask = box.mask(g)
    w = lat_weights(g.lat)[:, None] * mask
    return bump / ((bump * w).sum() / w.sum())


def ar2_coefficients(period: float, radius: float = ENSO_POLE_RADIUS) -> tuple[float, float]:
    theta = 2 * np.pi / period
    return 2 * radius * np.cos(theta), -radius ** 2


def ar2_stationary_var(a1: float, a2: float) -> float:
    """Stationary variance of an AR(2) with unit innovations."""
    return (1 - a2) / ((1 + a2) * ((1 - a2) ** 2 - a1 ** 2))


def member_rng(seed: int, member: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(member,)))


def _enso_series(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    e = cfg.enso
    period = e.period_months_mean * (1 + e.period_jitter * rng.uniform(-1, 1))
    a1, a2 = ar2_coefficients(period)
    innov = rng.standard_normal(cfg.n_months + _SPINUP_MONTHS)
    x = np.zeros_like(innov)
    for t in range(2, len(x)):
        x[t] = a1 * x[t - 1] + a2 * x[t - 2] + innov[t]
    return e.amplitude * x[_SPINUP_MONTHS:] / np.sqrt(ar2_stationary_var(a1, a2))


def _noise(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    L = cfg.noise.spatial_corr_length
    white = rng.standard_normal((cfg.n_months, cfg.n_lat, cfg.n_lon))
    if L > 1:
        white = uniform_filter(white, size=(1, L, L), mode=("nearest", "nearest", "wrap")) * L
    return cfg.noise.std * white


def generate_member(cfg: SynthConfig, member: int, clim=None, forced=None, pattern=None):
    """Return ``(SimSequence, planted_enso)`` for one member; depends only on (cfg, member)."""
    clim = climatology(cfg) if clim is None else clim
    forced = forced_series(cfg) if forced is None else forced
    pattern = enso_pattern(cfg) if pattern is None else pattern
    rng = member_rng(cfg.seed, member)
    enso = _enso_series(cfg, rng)
    months = np.arange(cfg.n_months) % 12
    data = (clim[months] + forced[:, None, None] + enso[:, None, None] * pattern[None]
            + _noise(cfg, rng))
    seq = SimSequence(cfg.grid, data.astype(np.float32), cfg.start_year, 1, member)
    return seq, enso


def generate_ensemble(cfg: SynthConfig) -> SynthTruth:
    clim, forced, pattern = climatology(cfg), forced_series(cfg), enso_pattern(cfg)
    members, ensos = [], []
    for m in range(cfg.n_members):
        seq, enso = generate_member(cfg, m, clim, forced, pattern)
        members.append(seq)
        ensos.append(enso)
    return SynthTruth(cfg, members, forced, np.array(ensos), clim, pattern)


def running_mean_bruteforce(series, window: int = 5) -> np.ndarray:
    half = window // 2
    n = len(series)
    out = np.empty(n)
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        total = 0.0
        for j in range(lo, hi):
            total += float(series[j])
        out[i] = total / (hi - lo)
    return out


def oracle_events_from_series(series, threshold: float = 0.4, min_months: int = 6,
                              smooth: int = 5) -> list[tuple[int, int, int]]:
    """Brute-force scan: every maximal above/below-threshold run of sufficient length.

    Returns ``(start, end_inclusive, sign)`` sorted by start.
    """
    x = running_mean_bruteforce(series, smooth) if smooth > 1 else np.asarray(series, float)
    events = []
    for sign in (1, -1):
        i = 0
        while i < len(x):
            if sign * x[i] > threshold:
                j = i
                while j + 1 < len(x) and sign * x[j + 1] > threshold:
                    j += 1
                if j - i + 1 >= min_months:
                    events.append((i, j, sign))
                i = j + 1
            else:
                i += 1
    return sorted(events)


def oracle_enso_events(truth: SynthTruth, member: int, threshold: float = 0.4,
                       min_months: int = 6, smooth: int = 5):
    ids = [m.member_id for m in truth.members]
    if member not in ids:
        raise KeyError(f"member {member} not in ensemble")
    return oracle_events_from_series(truth.enso[ids.index(member)], threshold, min_months, smooth)


def write_ensemble(truth: SynthTruth, out_dir) -> list[Path]:
    from .dataio import write_cgf

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for seq in truth.members:
        p = out / member_filename(seq.member_id)
        write_cgf(p, seq)
        paths.append(p)
    (out / "truth.json").write_text(json.dumps(truth.to_json(), sort_keys=True), encoding="utf-8")
    return paths


def member_filename(member_id: int) -> str:
    return f"member_{int(member_id):03d}.cgf"
