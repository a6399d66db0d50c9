"""Forecast evaluation measures.

Every function takes aligned true and predicted series and returns a scalar
or a small tuple.  Standard deviations use the population convention
(divide by ``T``) throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chaos import EstimationError, lyapunov_rosenstein

__all__ = [
    "DegenerateTargetError",
    "MetricReport",
    "nrmse",
    "vpt",
    "adev",
    "psd_welch",
    "psd_distance",
    "lyapunov_deviation",
    "basic_errors",
    "dtw_distance",
    "kl_divergence",
    "METRIC_REGISTRY",
]


class DegenerateTargetError(ValueError):
    """The true series has zero variance, so normalised errors are undefined."""


@dataclass
class MetricReport:
    """Metric name to value map with divergence or degeneracy flags."""

    values: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(METRIC_REGISTRY)
        if unknown:
            raise KeyError(f"unknown metrics: {sorted(unknown)}")


def _pair(y, y_hat):
    y = np.asarray(getattr(y, "data", y), dtype=float)
    y_hat = np.asarray(getattr(y_hat, "data", y_hat), dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y_hat.ndim == 1:
        y_hat = y_hat[:, None]
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return y, y_hat


def nrmse(y, y_hat) -> float:
    """Root-mean-square error over the true series' standard deviation.

    Multichannel inputs are scored per channel and the channel scores are
    averaged.

    Raises
    ------
    DegenerateTargetError
        If any channel of ``y`` is constant.
    """
    y, y_hat = _pair(y, y_hat)
    if len(y) < 2:
        raise ValueError("nrmse needs at least 2 samples")
    sd = y.std(axis=0)
    if np.any(sd == 0):
        raise DegenerateTargetError("target has zero variance")
    rmse = np.sqrt(np.mean((y - y_hat) ** 2, axis=0))
    return float(np.mean(rmse / sd))


def vpt(y, y_hat, epsilon: float = 0.2, dt: float = 1.0, lyapunov_time: float | None = None, scale=None):
    """Valid prediction time.

    The per-step error is the Euclidean norm of the channel-wise errors
    divided by each channel's standard deviation.  The valid time is the
    number of leading steps whose error stays below ``epsilon``, times ``dt``.

    Parameters
    ----------
    scale : array_like, optional
        Per-channel normaliser; defaults to the standard deviation of ``y``.

    Returns
    -------
    (float, float or None)
        Valid time and, when ``lyapunov_time`` is given, the same in
        Lyapunov times.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    y, y_hat = _pair(y, y_hat)
    sd = y.std(axis=0) if scale is None else np.broadcast_to(np.asarray(scale, dtype=float), (y.shape[1],))
    if np.any(sd == 0):
        raise DegenerateTargetError("target has zero variance")
    err = np.sqrt(np.sum(((y_hat - y) / sd) ** 2, axis=1))
    bad = np.flatnonzero(~(err < epsilon))
    steps = len(y) if bad.size == 0 else int(bad[0])
    t = steps * dt
    return t, (None if lyapunov_time is None else t / lyapunov_time)


def _occupancy(traj, lo, hi, cells):
    width = np.where(hi > lo, hi - lo, 1.0)
    idx = np.floor((traj - lo) / width * cells).astype(int)
    idx = np.clip(idx, 0, cells - 1)
    return set(map(tuple, idx))


def adev(traj_true, traj_pred, cells_per_axis: int = 30) -> int:
    """Number of grid cells visited by exactly one of two trajectories.

    The grid spans the joint bounding box of both trajectories with
    ``cells_per_axis`` equal cells per axis.
    """
    if cells_per_axis < 2:
        raise ValueError("cells_per_axis must be at least 2")
    a = np.asarray(traj_true, dtype=float)
    b = np.asarray(traj_pred, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("trajectories must be T x d with equal d")
    both = np.vstack([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    occ_a = _occupancy(a, lo, hi, cells_per_axis)
    occ_b = _occupancy(b, lo, hi, cells_per_axis)
    return len(occ_a ^ occ_b)


def psd_welch(series, segment_len: int = 1024, overlap_fraction: float = 0.5, dt: float = 1.0):
    """One-sided power spectral density by Welch averaging.

    Segments are mean-removed, Hann windowed and averaged.  The density is
    scaled so that ``sum(power) * df`` approximates the variance.

    Returns
    -------
    frequencies, power : ndarray
    """
    x = np.asarray(getattr(series, "data", series), dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError("psd_welch expects a scalar series")
        x = x[:, 0]
    if not 0.0 <= overlap_fraction <= 0.9:
        raise ValueError("overlap_fraction must lie in [0, 0.9]")
    if segment_len < 2 or segment_len > len(x):
        raise ValueError(f"series of length {len(x)} is too short for segment_len {segment_len}")
    hop = max(1, int(segment_len * (1.0 - overlap_fraction)))
    starts = range(0, len(x) - segment_len + 1, hop)
    n = np.arange(segment_len)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / segment_len)
    fs = 1.0 / dt
    norm = fs * np.sum(window**2)
    acc = np.zeros(segment_len // 2 + 1)
    count = 0
    for s in starts:
        seg = x[s : s + segment_len]
        seg = (seg - seg.mean()) * window
        acc += np.abs(np.fft.rfft(seg)) ** 2
        count += 1
    power = acc / (count * norm)
    if segment_len % 2 == 0:
        power[1:-1] *= 2.0
    else:
        power[1:] *= 2.0
    freqs = np.fft.rfftfreq(segment_len, d=dt)
    return freqs, power


def psd_distance(psd_a, psd_b) -> float:
    """L2 distance between two spectra on a common frequency grid.

    Each argument is a ``(frequencies, power)`` pair; the squared difference
    is integrated with the trapezoid rule.
    """
    fa, pa = (np.asarray(v, dtype=float) for v in psd_a)
    fb, pb = (np.asarray(v, dtype=float) for v in psd_b)
    if fa.shape != fb.shape or not np.allclose(fa, fb, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(fa)))):
        raise ValueError("spectra are on different frequency grids")
    diff2 = (pa - pb) ** 2
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(math.sqrt(trapezoid(diff2, fa)))


def lyapunov_deviation(y, y_hat, dt: float = 1.0, **settings):
    """Largest-exponent estimates of two series and their absolute gap.

    ``settings`` are forwarded to :func:`lyapunov_rosenstein`; multichannel
    series are scored on their first channel.
    """
    y, y_hat = _pair(y, y_hat)
    estimates = []
    for label, s in (("true", y[:, 0]), ("predicted", y_hat[:, 0])):
        try:
            estimates.append(lyapunov_rosenstein(s, dt=dt, **settings).lambda_max)
        except EstimationError as exc:
            raise EstimationError(f"{label} series: {exc}") from None
    lt, lp = estimates
    return lt, lp, abs(lt - lp)


def basic_errors(y, y_hat) -> dict:
    """MAE, MAPE (in percent, zero targets skipped), R^2 and Pearson correlation.

    Multichannel inputs are flattened.  The returned dict also carries
    ``mape_skipped``, the number of zero targets left out of MAPE.
    """
    y, y_hat = _pair(y, y_hat)
    a, b = y.ravel(), y_hat.ravel()
    err = a - b
    mae = float(np.mean(np.abs(err)))
    nz = a != 0
    with np.errstate(over="ignore"):
        mape = float(100.0 * np.mean(np.abs(err[nz] / a[nz]))) if nz.any() else float("nan")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err**2)) / ss_tot if ss_tot > 0 else float("nan")
    ac, bc = a - a.mean(), b - b.mean()
    den = math.sqrt(float(np.sum(ac**2)) * float(np.sum(bc**2)))
    pearson = float(np.sum(ac * bc) / den) if den > 0 else float("nan")
    if den > 0:
        pearson = max(-1.0, min(1.0, pearson))
    return {"mae": mae, "mape": mape, "r2": r2, "pearson": pearson, "mape_skipped": int(np.count_nonzero(~nz))}


def dtw_distance(a, b) -> float:
    """Dynamic time warping cost with absolute-difference local cost.

    Alignment paths use the unit steps ``(1, 0)``, ``(0, 1)`` and ``(1, 1)``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw needs non-empty series")
    n, m = a.size, b.size
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    cost = np.abs(a[:, None] - b[None, :])
    for i in range(1, n + 1):
        row_prev = D[i - 1]
        row = D[i]
        c = cost[i - 1]
        for j in range(1, m + 1):
            best = row_prev[j - 1]
            if row_prev[j] < best:
                best = row_prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = c[j - 1] + best
    return float(D[n, m])


def kl_divergence(y, y_hat, bins: int = 50) -> float:
    """Discrete KL divergence of ``y`` from ``y_hat`` value histograms.

    Both histograms share ``bins`` equal bins over the union range and get one
    pseudo-count per bin before normalisation.
    """
    if bins < 2:
        raise ValueError("bins must be at least 2")
    a = np.asarray(getattr(y, "data", y), dtype=float).ravel()
    b = np.asarray(getattr(y_hat, "data", y_hat), dtype=float).ravel()
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        hi = lo + 1.0
    ca, _ = np.histogram(a, bins=bins, range=(lo, hi))
    cb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = (ca + 1.0) / (ca.sum() + bins)
    q = (cb + 1.0) / (cb.sum() + bins)
    return float(np.sum(p * np.log(p / q)))


METRIC_REGISTRY = (
    "nrmse",
    "vpt",
    "vpt_lyapunov",
    "adev",
    "psd_distance",
    "lyapunov_deviation",
    "mae",
    "mape",
    "r2",
    "pearson",
    "dtw",
    "kl",
)
