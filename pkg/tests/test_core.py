import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ensemble_ldm.core import (
    ConfigError, GridSpec, InvalidFieldError, Normalizer, RangeError, SimSequence, annual_mean,
    denormalize, monthly_anomaly, normalize, spatial_mean_weighted,
)
from ensemble_ldm.synthdata import SynthConfig, generate_member


def seq_of(data, start_year=2000, start_month=1):
    data = np.asarray(data, dtype=np.float32)
    return SimSequence(GridSpec.regular(*data.shape[1:]), data, start_year, start_month)


def test_grid_invariants():
    g = GridSpec.regular(24, 48)
    assert g.lat[0] == pytest.approx(-86.25) and g.lon[1] == pytest.approx(7.5)
    with pytest.raises(ConfigError):
        GridSpec.regular(2, 8)
    with pytest.raises(ConfigError):
        GridSpec(4, 8, np.array([0, 1, 1, 2.0]), np.arange(8) * 45.0)


@pytest.mark.parametrize("shape", [(4, 8), (16, 32), (96, 192)])
def test_spatial_mean_constant(shape):
    g = GridSpec.regular(*shape)
    assert spatial_mean_weighted(np.full(shape, 3.0), g.lat) == pytest.approx(3.0, rel=1e-12)


def test_spatial_mean_symmetric_bands():
    values = np.array([[0.0] * 8, [10.0] * 8])
    assert spatial_mean_weighted(values, np.array([-60.0, 60.0])) == pytest.approx(5.0)


def test_spatial_mean_matches_quadrature_oracle():
    g = GridSpec.regular(16, 32)
    f = np.cos(np.deg2rad(g.lat)) ** 2 + 0.1 * g.lat
    field = np.repeat(f[:, None], 32, axis=1)
    num = den = 0.0
    for i in range(16):
        w = np.cos(g.lat[i] * np.pi / 180.0)
        for j in range(32):
            num += w * field[i, j]
            den += w
    assert spatial_mean_weighted(field, g.lat) == pytest.approx(num / den, rel=1e-12)


def test_spatial_mean_rejects_nonfinite():
    g = GridSpec.regular(4, 8)
    bad = np.zeros((4, 8))
    bad[1, 2] = np.nan
    with pytest.raises(InvalidFieldError):
        spatial_mean_weighted(bad, g.lat)


def test_unweighted_mode_differs():
    g = GridSpec.regular(8, 16)
    field = np.repeat(g.lat[:, None], 16, axis=1) ** 2
    assert spatial_mean_weighted(field, g.lat, weighted=False) > spatial_mean_weighted(field, g.lat)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 2**32 - 1))
def test_spatial_mean_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec.regular(6, 12)
    F, G = rng.normal(size=(2, 6, 12))
    lhs = spatial_mean_weighted(a * F + b * G, g.lat)
    rhs = a * spatial_mean_weighted(F, g.lat) + b * spatial_mean_weighted(G, g.lat)
    assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-9)


def test_annual_mean_trivial():
    years, vals = annual_mean(seq_of(np.ones((24, 4, 8))))
    assert list(years) == [2000, 2001] and np.allclose(vals, 1.0)
    ramp = np.arange(1, 13, dtype=np.float32)[:, None, None] * np.ones((12, 4, 8))
    assert annual_mean(seq_of(ramp))[1][0] == pytest.approx(6.5)


def test_annual_mean_partial_years_dropped():
    years, _ = annual_mean(seq_of(np.zeros((30, 4, 8)), start_month=7))
    assert list(years) == [2001, 2002]
    years, vals = annual_mean(seq_of(np.zeros((11, 4, 8))))
    assert len(years) == 0 and len(vals) == 0


def test_annual_mean_synthetic_member_matches_oracle():
    cfg = SynthConfig(n_members=2, n_years=3)
    seq, _ = generate_member(cfg, 0)
    w = np.cos(np.deg2rad(seq.grid.lat))
    expected = []
    for y in range(3):
        monthly = []
        for m in range(12):
            f = seq.data[12 * y + m].astype(np.float64)
            monthly.append(sum(w[i] * f[i].sum() for i in range(f.shape[0])) / (w.sum() * f.shape[1]))
        expected.append(sum(monthly) / 12)
    assert np.allclose(annual_mean(seq)[1], expected, rtol=1e-12)


def test_anomaly_of_constant_and_cycle_is_zero():
    assert np.all(monthly_anomaly(seq_of(np.full((36, 4, 8), 5.0))).data == 0)
    cycle = np.sin(2 * np.pi * np.arange(48) / 12)[:, None, None] * np.ones((48, 4, 8))
    assert np.abs(monthly_anomaly(seq_of(cycle)).data).max() < 1e-6


def test_anomaly_recovers_planted_trend():
    n = 60
    trend = 0.01 * np.arange(n)
    data = (trend[:, None, None] + np.sin(2 * np.pi * np.arange(n) / 12)[:, None, None]) * np.ones((n, 4, 8))
    anom = monthly_anomaly(seq_of(data), 2001, 2003).data[:, 0, 0]
    # oracle: trend minus the mean of the same calendar month over 2001-2003
    cal_mean = np.array([trend[[12 + m, 24 + m, 36 + m]].mean() for m in range(12)])
    assert np.allclose(anom, trend - cal_mean[np.arange(n) % 12], atol=1e-5)


def test_anomaly_window_sums_to_zero():
    rng = np.random.default_rng(0)
    anom = monthly_anomaly(seq_of(rng.normal(10, 3, size=(36, 4, 8))))
    for m in range(12):
        assert np.abs(anom.data[m::12].astype(np.float64).sum(axis=0)).max() <= 1e-4


def test_anomaly_window_out_of_range():
    with pytest.raises(RangeError):
        monthly_anomaly(seq_of(np.zeros((24, 4, 8))), 1999, 2000)


def test_normalize_examples():
    s = seq_of(np.full((1, 4, 8), 10.0))
    assert np.all(normalize(s, Normalizer(0.0, 1.0)).data == 10.0)
    assert np.all(normalize(s, Normalizer(10.0, 2.0)).data == 0.0)
    with pytest.raises(ConfigError):
        Normalizer(0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(data=hnp.arrays(np.float32, (3, 4, 8), elements=st.floats(-60, 60, width=32)),
       mean=st.floats(-30, 30), std=st.floats(0.1, 20))
def test_normalize_roundtrip(data, mean, std):
    s = seq_of(data)
    back = denormalize(normalize(s, Normalizer(mean, std)), Normalizer(mean, std))
    assert np.abs(back.data - s.data).max() <= 1e-5 * max(1.0, np.abs(s.data).max(), abs(mean))


def test_climatology_normalizer_roundtrip():
    cfg = SynthConfig(n_members=2, n_years=2)
    seq, _ = generate_member(cfg, 0)
    norm = Normalizer.fit([seq])
    assert norm.mean.shape == (12, 24, 48)
    z = normalize(seq, norm)
    assert abs(float(z.data.mean())) < 1e-3 and float(z.data.std()) == pytest.approx(1.0, rel=1e-3)
    assert np.abs(denormalize(z, norm).data - seq.data).max() < 1e-4
