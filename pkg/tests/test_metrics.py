import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal

from reservoirbench.chaos import LowConfidenceWarning, lyapunov_rosenstein
from reservoirbench.dynamics import Lorenz, SamplingPlan, simulate
from reservoirbench.metrics import (
    METRIC_REGISTRY,
    DegenerateTargetError,
    MetricReport,
    adev,
    basic_errors,
    dtw_distance,
    kl_divergence,
    lyapunov_deviation,
    nrmse,
    psd_distance,
    psd_welch,
    vpt,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def series(n_min=3, n_max=40):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(float, n, elements=finite))


@pytest.fixture(scope="module")
def lorenz_pair():
    a = simulate(Lorenz(), SamplingPlan(0.02, 2000, 1000, (1.0, 1.0, 1.0))).data
    b = simulate(Lorenz(), SamplingPlan(0.02, 2000, 1000, (-3.0, 2.0, 20.0))).data
    return a, b


# nrmse


def test_nrmse_perfect_and_mean():
    y = np.random.default_rng(0).normal(size=(50, 3))
    assert nrmse(y, y) == 0.0
    assert nrmse(y, np.broadcast_to(y.mean(axis=0), y.shape)) == pytest.approx(1.0, abs=1e-9)


def test_nrmse_matches_direct_formula():
    rng = np.random.default_rng(1)
    y, yh = rng.normal(size=(40, 2)), rng.normal(size=(40, 2))
    per = []
    for c in range(2):
        T = len(y)
        mu = sum(y[:, c]) / T
        sd = math.sqrt(sum((v - mu) ** 2 for v in y[:, c]) / T)
        rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(y[:, c], yh[:, c])) / T)
        per.append(rmse / sd)
    assert nrmse(y, yh) == pytest.approx(sum(per) / 2, abs=1e-12)


@given(st.integers(0, 1000), st.floats(0.1, 10) | st.floats(-10, -0.1), st.floats(-50, 50))
@settings(max_examples=40)
def test_nrmse_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    y, yh = rng.normal(size=30), rng.normal(size=30)
    assert nrmse(a * y + b, a * yh + b) == pytest.approx(nrmse(y, yh), rel=1e-9)


def test_nrmse_degenerate_and_short():
    with pytest.raises(DegenerateTargetError):
        nrmse(np.ones(5), np.zeros(5))
    with pytest.raises(ValueError):
        nrmse([1.0], [1.0])
    with pytest.raises(ValueError):
        nrmse(np.ones(4), np.ones(5))


# vpt


def test_vpt_perfect_is_full_horizon():
    y = np.random.default_rng(2).normal(size=(25, 3))
    assert vpt(y, y, dt=0.5) == (12.5, None)


def test_vpt_violation_at_step_seven():
    y = np.sin(np.linspace(0, 6, 40))
    yh = y.copy()
    yh[7:] += 10.0
    t, lt = vpt(y, yh, 0.2, 0.02, lyapunov_time=0.1)
    assert t == pytest.approx(7 * 0.02) and lt == pytest.approx(1.4)


def test_vpt_first_step_bad():
    y = np.sin(np.linspace(0, 6, 40))
    assert vpt(y, y + 5.0)[0] == 0.0


def test_vpt_uses_channel_normalised_euclidean_norm():
    y = np.column_stack([np.sin(np.linspace(0, 6, 50)), 10 * np.cos(np.linspace(0, 6, 50))])
    sd = y.std(axis=0)
    yh = y + 0.1 * sd  # per-step error sqrt(2) * 0.1
    assert vpt(y, yh, 0.15)[0] == 50
    assert vpt(y, yh, 0.14)[0] == 0


@given(st.integers(0, 1000), st.floats(0.01, 1), st.floats(0.01, 1))
@settings(max_examples=40)
def test_vpt_monotone_in_epsilon(seed, e1, e2):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(60, 2))
    yh = y + np.cumsum(rng.normal(scale=0.02, size=(60, 2)), axis=0)
    lo, hi = sorted((e1, e2))
    assert vpt(y, yh, lo)[0] <= vpt(y, yh, hi)[0]


def test_vpt_rejects_epsilon():
    with pytest.raises(ValueError):
        vpt(np.arange(3.0), np.arange(3.0), 0.0)


# adev


def occupancy_oracle(a, b, cells):
    both = np.vstack([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    sets = []
    for traj in (a, b):
        s = set()
        for p in traj:
            key = []
            for v, l, h in zip(p, lo, hi):
                k = int((v - l) / (h - l) * cells) if h > l else 0
                key.append(min(k, cells - 1))
            s.add(tuple(key))
        sets.append(s)
    return len(sets[0] - sets[1]) + len(sets[1] - sets[0])


def test_adev_identical_zero(lorenz_pair):
    a, _ = lorenz_pair
    assert adev(a, a) == 0


def test_adev_two_points():
    assert adev(np.zeros((3, 3)), np.ones((4, 3))) == 2


def test_adev_lorenz_segments_match_oracle(lorenz_pair):
    a, b = lorenz_pair
    got = adev(a, b, 30)
    assert got > 0 and got == adev(a, b, 30)
    assert got == occupancy_oracle(a, b, 30)


@given(st.integers(0, 1000), st.integers(2, 12))
@settings(max_examples=30)
def test_adev_symmetric(seed, cells):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(30, 3)) + 0.5
    assert adev(a, b, cells) == adev(b, a, cells)


def test_adev_rejects_coarse_grid():
    with pytest.raises(ValueError):
        adev(np.zeros((2, 3)), np.zeros((2, 3)), 1)


# spectra


def test_psd_sine_peak():
    dt, f0 = 0.01, 3.0
    t = np.arange(20000) * dt
    f, p = psd_welch(np.sin(2 * np.pi * f0 * t), 1024, 0.5, dt)
    assert abs(f[np.argmax(p)] - f0) <= f[1] - f[0]


def test_psd_white_noise_flat():
    x = np.random.default_rng(3).normal(size=1024 * 50)
    _, p = psd_welch(x, 1024, 0.5)
    assert len(range(0, len(x) - 1024 + 1, 512)) >= 99
    inner = p[1:-1]
    assert inner.max() / inner.min() < 10


@pytest.mark.parametrize("seg,overlap", [(256, 0.5), (512, 0.0), (300, 0.25)])
def test_psd_matches_scipy_welch(seg, overlap):
    x = np.random.default_rng(4).normal(size=5000)
    f, p = psd_welch(x, seg, overlap, 0.1)
    noverlap = seg - max(1, int(seg * (1 - overlap)))
    fs, ps = signal.welch(x, fs=10.0, window="hann", nperseg=seg, noverlap=noverlap, detrend="constant")
    assert np.allclose(f, fs)
    assert np.allclose(p, ps, rtol=1e-10, atol=1e-14)


def test_psd_parseval(lorenz_pair):
    a, _ = lorenz_pair
    x = np.tile(a[:, 2], 4)
    f, p = psd_welch(x, 1024, 0.5, 0.02)
    assert np.sum(p) * (f[1] - f[0]) == pytest.approx(x.var(), rel=0.02)


def test_psd_lorenz_broadband():
    z = simulate(Lorenz(), SamplingPlan(0.02, 8000, 1000)).data[:, 2]
    _, p = psd_welch(z, 1024, 0.5, 0.02)
    assert p.max() / p.sum() < 0.5


def test_psd_too_short():
    with pytest.raises(ValueError, match="too short"):
        psd_welch(np.ones(100), 1024)


def test_psd_distance_properties():
    f = np.linspace(0, 5, 51)
    a = np.exp(-((f - 2) ** 2))
    assert psd_distance((f, a), (f, a)) == 0.0
    assert psd_distance((f, a), (f, 2 * a)) == pytest.approx(math.sqrt(np.sum((a[1:] ** 2 + a[:-1] ** 2) / 2 * np.diff(f))), rel=1e-12)
    with pytest.raises(ValueError):
        psd_distance((f, a), (f[:-1], a[:-1]))


def test_psd_distance_disjoint_peaks():
    f = np.arange(10.0)
    a, b = np.zeros(10), np.zeros(10)
    a[2], b[6] = 3.0, 4.0
    # interior spikes: trapezoid weight 1 per bin on a unit grid
    assert psd_distance((f, a), (f, b)) == pytest.approx(math.sqrt(3.0**2 + 4.0**2))


# lyapunov deviation


def test_lyapunov_deviation_identical(lorenz_pair):
    a, _ = lorenz_pair
    assert lyapunov_deviation(a, a, 0.02, k_max=40, fit_range=(5, 30))[2] == 0.0


def test_lyapunov_deviation_sine_vs_lorenz(lorenz_pair):
    a, _ = lorenz_pair
    s = np.sin(np.arange(len(a)) * 0.02 * 2 * np.pi / 0.75)
    kw = dict(m=3, tau_lag=5, k_max=40, fit_range=(5, 30))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowConfidenceWarning)
        lt, lp, d = lyapunov_deviation(a[:, 0], s, 0.02, **kw)
        oracle = lyapunov_rosenstein(a[:, 0], dt=0.02, **kw).lambda_max
    assert lt == oracle
    assert abs(lp) < 0.1 * lt
    assert d == pytest.approx(lt, rel=0.1)


# basic errors


def test_basic_errors_perfect():
    y = np.array([1.0, -2.0, 3.0, 4.0])
    out = basic_errors(y, y)
    assert (out["mae"], out["mape"], out["r2"], out["pearson"]) == (0.0, 0.0, 1.0, 1.0)


def test_basic_errors_mean_prediction():
    y = np.array([1.0, -2.0, 3.0, 4.0])
    assert basic_errors(y, np.full(4, y.mean()))["r2"] == pytest.approx(0.0, abs=1e-15)


def test_basic_errors_match_formulas():
    rng = np.random.default_rng(5)
    y, yh = rng.normal(size=30) + 3, rng.normal(size=30)
    out = basic_errors(y, yh)
    n = len(y)
    my, mh = sum(y) / n, sum(yh) / n
    mae = sum(abs(a - b) for a, b in zip(y, yh)) / n
    mape = 100 * sum(abs((a - b) / a) for a, b in zip(y, yh)) / n
    r2 = 1 - sum((a - b) ** 2 for a, b in zip(y, yh)) / sum((a - my) ** 2 for a in y)
    cov = sum((a - my) * (b - mh) for a, b in zip(y, yh))
    rho = cov / math.sqrt(sum((a - my) ** 2 for a in y) * sum((b - mh) ** 2 for b in yh))
    assert out["mae"] == pytest.approx(mae, abs=1e-12)
    assert out["mape"] == pytest.approx(mape, abs=1e-12)
    assert out["r2"] == pytest.approx(r2, abs=1e-12)
    assert out["pearson"] == pytest.approx(rho, abs=1e-12)


def test_basic_errors_mape_zero_targets():
    out = basic_errors(np.array([0.0, 2.0]), np.array([1.0, 1.0]))
    assert out["mape_skipped"] == 1 and out["mape"] == pytest.approx(50.0)
    assert math.isnan(basic_errors(np.zeros(3), np.ones(3))["mape"])


@given(series(), series())
@settings(max_examples=60)
def test_pearson_and_r2_bounds(a, b):
    n = min(len(a), len(b))
    out = basic_errors(a[:n], b[:n])
    if not math.isnan(out["pearson"]):
        assert -1.0 <= out["pearson"] <= 1.0
    if not math.isnan(out["r2"]):
        assert out["r2"] <= 1.0


# dtw


def enumerate_paths(a, b):
    n, m = len(a), len(b)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += abs(a[i] - b[j])
        if (i, j) == (n - 1, m - 1):
            best = min(best, acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def test_dtw_identical_and_stretch():
    assert dtw_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert dtw_distance([0, 0, 1, 1], [0, 1, 1]) == 0.0
    assert enumerate_paths([0, 0, 1, 1], [0, 1, 1]) == 0.0


@given(
    st.lists(st.integers(-5, 5), min_size=1, max_size=6),
    st.lists(st.integers(-5, 5), min_size=1, max_size=6),
)
@settings(max_examples=80)
def test_dtw_equals_path_enumeration(a, b):
    assert dtw_distance(a, b) == enumerate_paths(a, b)


@given(series(2, 30), st.floats(-5, 5))
@settings(max_examples=40)
def test_dtw_diagonal_bound(a, c):
    b = a + c
    assert dtw_distance(a, b) <= np.sum(np.abs(a - b)) + 1e-9
    assert dtw_distance(a, b) <= len(a) * abs(c) + 1e-9


def test_dtw_rejects_empty():
    with pytest.raises(ValueError):
        dtw_distance([], [1.0])


# kl


def test_kl_identical_samples():
    x = np.random.default_rng(6).normal(size=10_000)
    assert kl_divergence(x, x.copy()) < 1e-3


def test_kl_asymmetric():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=5000), rng.exponential(size=5000)
    assert kl_divergence(a, b) != pytest.approx(kl_divergence(b, a), rel=1e-3)


def smoothed_disjoint_kl(n, bins):
    # all n samples of p in the first bin, all of q in the last
    p = np.full(bins, 1.0)
    q = np.full(bins, 1.0)
    p[0] += n
    q[-1] += n
    p, q = p / p.sum(), q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def test_kl_disjoint_closed_form_and_monotone():
    a, b = np.zeros(1000), np.ones(1000)
    vals = []
    for bins in (2, 5, 10, 50):
        got = kl_divergence(a, b, bins)
        assert got == pytest.approx(smoothed_disjoint_kl(1000, bins), rel=1e-12)
        vals.append(got)
    assert vals[0] > 1.0
    # smoothing mass grows with the bin count, so the divergence shrinks
    assert all(x > y for x, y in zip(vals, vals[1:]))


@given(series(2, 50), series(2, 50), st.integers(2, 60))
@settings(max_examples=60)
def test_kl_nonnegative(a, b, bins):
    assert kl_divergence(a, b, bins) >= -1e-12


def test_kl_rejects_bins():
    with pytest.raises(ValueError):
        kl_divergence([1.0], [2.0], 1)


# report


def test_metric_report_keys():
    MetricReport({"nrmse": 0.1, "dtw": 3.0})
    with pytest.raises(KeyError):
        MetricReport({"rmse": 1.0})
    assert len(set(METRIC_REGISTRY)) == len(METRIC_REGISTRY)


@pytest.mark.parametrize("a,b", list(itertools.permutations([np.zeros((4, 3)), np.ones((4, 3))], 2)))
def test_adev_disjoint_permutations(a, b):
    assert adev(a, b) == 2
