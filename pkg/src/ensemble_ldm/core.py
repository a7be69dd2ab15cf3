"""Grid semantics, latitude-weighted statistics, anomalies and normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MONTHS_PER_YEAR = 12


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class RangeError(ValueError):
    pass


class FormatError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class InvalidFieldError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GridSpec:
    n_lat: int
    n_lon: int
    lat: np.ndarray
    lon: np.ndarray
    months_per_year: int = MONTHS_PER_YEAR

    def __post_init__(self):
        if self.n_lat < 4 or self.n_lon < 8:
            raise ConfigError(f"grid too small: {self.n_lat}x{self.n_lon} (need >= 4x8)")
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        if lat.shape != (self.n_lat,) or lon.shape != (self.n_lon,):
            raise ConfigError("lat/lon centers do not match grid dimensions")
        if np.any(np.diff(lat) <= 0) or lat[0] < -90 or lat[-1] > 90:
            raise ConfigError("lat centers must be strictly increasing within [-90, 90]")
        dlon = np.diff(lon)
        if np.any(dlon <= 0) or not np.allclose(dlon, dlon[0]) or lon[0] < 0 or lon[-1] >= 360:
            raise ConfigError("lon centers must be equally spaced, increasing, within [0, 360)")
        if self.months_per_year != MONTHS_PER_YEAR:
            raise ConfigError("only 12-month calendars are supported")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    @classmethod
    def regular(cls, n_lat: int, n_lon: int) -> "GridSpec":
        """Cell-centred global grid: lat from -90+d/2, lon from 0."""
        dlat = 180.0 / n_lat
        lat = -90.0 + dlat * (np.arange(n_lat) + 0.5)
        lon = np.arange(n_lon) * (360.0 / n_lon)
        return cls(n_lat, n_lon, lat, lon)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    def __eq__(self, other):
        return (
            isinstance(other, GridSpec)
            and self.shape == other.shape
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
        )

    def __hash__(self):
        return hash((self.n_lat, self.n_lon, self.lat.tobytes(), self.lon.tobytes()))


@dataclass
class SimSequence:
    """Monthly sequence of single-channel fields, ``data[time, lat, lon]`` in degC."""

    grid: GridSpec
    data: np.ndarray
    start_year: int = 1850
    start_month: int = 1
    member_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[1:] != self.grid.shape:
            raise ShapeError(f"data shape {self.data.shape} does not match grid {self.grid.shape}")
        if self.data.shape[0] < 1:
            raise ShapeError("sequence must contain at least one month")
        if not 1 <= self.start_month <= 12:
            raise RangeError(f"start_month {self.start_month} outside 1..12")

    def __len__(self):
        return self.data.shape[0]

    @property
    def month_index(self) -> np.ndarray:
        """Absolute month counter (year*12 + month-1) for each step."""
        first = self.start_year * 12 + self.start_month - 1
        return first + np.arange(len(self))

    @property
    def calendar_month(self) -> np.ndarray:
        return self.month_index % 12

    @property
    def year(self) -> np.ndarray:
        return self.month_index // 12

    def slice_months(self, start: int, stop: int) -> "SimSequence":
        if not 0 <= start < stop <= len(self):
            raise RangeError(f"month slice [{start}, {stop}) outside sequence of {len(self)}")
        first = self.month_index[start]
        return SimSequence(self.grid, self.data[start:stop], int(first // 12),
                           int(first % 12) + 1, self.member_id)

    def with_data(self, data: np.ndarray) -> "SimSequence":
        return SimSequence(self.grid, data, self.start_year, self.start_month, self.member_id)


def lat_weights(lat: np.ndarray) -> np.ndarray:
    return np.cos(np.deg2rad(np.asarray(lat, dtype=np.float64)))


def _check_finite(values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise InvalidFieldError("field contains NaN or Inf")


def spatial_mean_weighted(values, lat, weighted: bool = True):
    """Area-weighted mean over the trailing (lat, lon) axes.

    ``values`` may carry leading axes (e.g. time); the result keeps them.
    Accumulation is float64. ``weighted=False`` gives the plain cell mean.
    """
    v = np.asarray(values, dtype=np.float64)
    _check_finite(v)
    if v.ndim < 2 or v.shape[-2] != len(lat):
        raise ShapeError(f"values {v.shape} incompatible with {len(lat)} latitudes")
    w = lat_weights(lat) if weighted else np.ones(len(lat))
    zonal = v.mean(axis=-1)
    return (zonal * w).sum(axis=-1) / w.sum()


def annual_mean(seq: SimSequence, weighted: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per calendar year mean of monthly spatial means.

    Leading and trailing partial years are dropped; fewer than 12 months
    of a full year yields empty arrays.
    """
    monthly = spatial_mean_weighted(seq.data, seq.grid.lat, weighted)
    skip = (12 - (seq.start_month - 1)) % 12
    n_years = (len(seq) - skip) // 12
    if n_years <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    first_year = seq.start_year + (1 if skip else 0)
    blocks = monthly[skip: skip + 12 * n_years].reshape(n_years, 12)
    return first_year + np.arange(n_years), blocks.mean(axis=1)


def monthly_climatology(seq: SimSequence, clim_start: int | None = None,
                        clim_end: int | None = None) -> np.ndarray:
    """Mean field per calendar month over the inclusive year window -> [12, lat, lon]."""
    years = seq.year
    lo = years[0] if clim_start is None else clim_start
    hi = years[-1] if clim_end is None else clim_end
    if lo > hi or lo < years[0] or hi > years[-1]:
        raise RangeError(f"climatology window {lo}-{hi} not inside {years[0]}-{years[-1]}")
    sel = (years >= lo) & (years <= hi)
    cal = seq.calendar_month
    clim = np.zeros((12,) + seq.grid.shape)
    for m in range(12):
        idx = sel & (cal == m)
        if not idx.any():
            raise RangeError(f"calendar month {m + 1} absent from climatology window {lo}-{hi}")
        clim[m] = seq.data[idx].astype(np.float64).mean(axis=0)
    return clim


def monthly_anomaly(seq: SimSequence, clim_start: int | None = None,
                    clim_end: int | None = None) -> SimSequence:
    """Subtract the calendar-month climatology; window defaults to the full record."""
    clim = monthly_climatology(seq, clim_start, clim_end)
    anom = seq.data.astype(np.float64) - clim[seq.calendar_month]
    return seq.with_data(anom.astype(np.float32))


@dataclass(frozen=True)
class Normalizer:
    """Affine field scaling ``(v - mean) / std``.

    ``mean`` is a scalar, or a per-calendar-month climatology of shape
    ``[12, lat, lon]`` in which case ``month`` selects rows per time step.
    """

    mean: float | np.ndarray = 0.0
    std: float = 1.0
    _clim: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.std) or self.std <= 0:
            raise ConfigError(f"normalizer std must be > 0, got {self.std}")
        if np.ndim(self.mean) not in (0, 3):
            raise ConfigError("normalizer mean must be scalar or [12, lat, lon]")
        object.__setattr__(self, "_clim", np.ndim(self.mean) == 3)

    @classmethod
    def fit(cls, seqs: list[SimSequence], climatology: bool = True) -> "Normalizer":
        for s in seqs:
            bad = np.argwhere(~np.isfinite(s.data))
            if len(bad):
                raise NumericError(f"member {s.member_id} has {len(bad)} non-finite value(s), "
                                   f"first at (month, lat, lon) index {tuple(int(i) for i in bad[0])}")
        if climatology:
            total = np.zeros((12,) + seqs[0].grid.shape)
            counts = np.zeros(12)
            for s in seqs:
                cal = s.calendar_month
                for m in range(12):
                    sel = cal == m
                    total[m] += s.data[sel].astype(np.float64).sum(axis=0)
                    counts[m] += sel.sum()
            if np.any(counts == 0):
                raise RangeError("every calendar month must be present to fit a climatology")
            mean = (total / counts[:, None, None]).astype(np.float32)
            resid = np.concatenate([(s.data - mean[s.calendar_month]).ravel() for s in seqs])
            return cls(mean, float(resid.astype(np.float64).std()))
        flat = np.concatenate([s.data.ravel() for s in seqs]).astype(np.float64)
        return cls(float(flat.mean()), float(flat.std()))

    def _offset(self, months):
        if not self._clim:
            return np.float32(self.mean)
        if months is None:
            raise ConfigError("climatological normalizer needs calendar months")
        return np.asarray(self.mean, dtype=np.float32)[np.asarray(months)]

    def normalize(self, values: np.ndarray, months=None) -> np.ndarray:
        return ((np.asarray(values, np.float32) - self._offset(months)) / np.float32(self.std)).astype(np.float32)

    def denormalize(self, values: np.ndarray, months=None) -> np.ndarray:
        return (np.asarray(values, np.float32) * np.float32(self.std) + self._offset(months)).astype(np.float32)

    def to_dict(self) -> dict:
        if self._clim:
            return {"kind": "climatology", "std": self.std}
        return {"kind": "scalar", "mean": float(self.mean), "std": self.std}


def normalize(seq: SimSequence, norm: Normalizer) -> SimSequence:
    return seq.with_data(norm.normalize(seq.data, seq.calendar_month))


def denormalize(seq: SimSequence, norm: Normalizer) -> SimSequence:
    return seq.with_data(norm.denormalize(seq.data, seq.calendar_month))
