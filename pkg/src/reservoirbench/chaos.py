"""Dynamical-complexity diagnostics.

Largest Lyapunov exponents (nearest-neighbour divergence, renormalised pair
tracking, analytic logistic), finite-time Lyapunov fields, logistic
bifurcation scans and a handful of symbolic, entropy and recurrence
descriptors of scalar series and reservoir states.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import IntegrationError, TimeSeries, as_array, delay_embed, rk4_step

logger = logging.getLogger(__name__)

__all__ = [
    "EstimationError",
    "LowConfidenceWarning",
    "LyapunovEstimate",
    "FtleField",
    "lyapunov_rosenstein",
    "lyapunov_rosenstein_auto",
    "lyapunov_wolf",
    "lyapunov_wolf_auto",
    "ClampWarning",
    "logistic_lyapunov",
    "mean_period",
    "autocorrelation_lag",
    "ftle_field",
    "bifurcation_scan",
    "permutation_entropy",
    "sliding_entropy",
    "recurrence_density",
    "symbolic_derivative",
    "input_state_xcorr",
]


class EstimationError(RuntimeError):
    """A Lyapunov estimator could not produce a value."""


class LowConfidenceWarning(UserWarning):
    """Emitted when an estimate is returned but should be read with care."""


@dataclass
class LyapunovEstimate:
    """Largest Lyapunov exponent with the evidence behind it.

    Attributes
    ----------
    lambda_max : float
        Exponent in inverse time units.
    fit_range : tuple of int
        Inclusive step range used for the slope (Rosenstein) or the first and
        last segment index (Wolf).
    method : str
        ``"rosenstein"``, ``"wolf"`` or ``"logistic_analytic"``.
    low_confidence : bool
        True when the divergence curve does not rise monotonically early on.
    curve : ndarray, optional
        Mean log-divergence per step (Rosenstein only).
    """

    lambda_max: float
    fit_range: tuple
    method: str
    low_confidence: bool = False
    curve: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.fit_range[1] < self.fit_range[0]:
            raise ValueError("fit_range must be non-empty")
        if not math.isfinite(self.lambda_max):
            raise EstimationError("non-finite Lyapunov estimate")

    def to_dict(self) -> dict:
        return {
            "lambda_max": float(self.lambda_max),
            "fit_range": [int(self.fit_range[0]), int(self.fit_range[1])],
            "method": self.method,
            "low_confidence": bool(self.low_confidence),
        }


def _scalar(series) -> np.ndarray:
    x = as_array(series)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError("expected a scalar series")
        x = x[:, 0]
    return np.asarray(x, dtype=float)


def _nearest_neighbours(points: np.ndarray, n_ref: int, theiler: int, chunk: int = 1024):
    """Exact nearest neighbour of each of the first ``n_ref`` points.

    Candidates are restricted to the same first ``n_ref`` points and to
    temporal separation strictly larger than ``theiler``.  Returns the
    neighbour index (-1 where none exists) and the distance.
    """
    pts = points[:n_ref]
    sq = np.einsum("ij,ij->i", pts, pts)
    nn = np.full(n_ref, -1, dtype=int)
    dist = np.full(n_ref, np.inf)
    idx = np.arange(n_ref)
    for start in range(0, n_ref, chunk):
        stop = min(start + chunk, n_ref)
        block = pts[start:stop]
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * block @ pts.T
        np.maximum(d2, 0.0, out=d2)
        rows = idx[start:stop]
        mask = np.abs(rows[:, None] - idx[None, :]) <= theiler
        d2[mask] = np.inf
        # identical points carry no separation to follow
        d2[d2 == 0.0] = np.inf
        j = np.argmin(d2, axis=1)
        best = d2[np.arange(stop - start), j]
        ok = np.isfinite(best)
        nn[start:stop][ok] = j[ok]
        dist[start:stop][ok] = np.sqrt(best[ok])
    return nn, dist


def _divergence_curve(points: np.ndarray, k_max: int, theiler: int) -> np.ndarray:
    n_ref = len(points) - k_max
    if n_ref < 2:
        raise EstimationError("series too short for the requested k_max")
    nn, _ = _nearest_neighbours(points, n_ref, theiler)
    valid = np.flatnonzero(nn >= 0)
    if valid.size == 0:
        raise EstimationError("no valid neighbour pairs outside the Theiler window")
    partner = nn[valid]
    curve = np.empty(k_max + 1)
    for k in range(k_max + 1):
        d = np.linalg.norm(points[valid + k] - points[partner + k], axis=1)
        d = d[d > 0]
        if d.size == 0:
            raise EstimationError(f"all neighbour pairs coincide at k={k}")
        curve[k] = np.mean(np.log(d))
    return curve


def _ols_slope(y: np.ndarray, lo: int, hi: int) -> float:
    k = np.arange(lo, hi + 1, dtype=float)
    seg = y[lo : hi + 1]
    kc = k - k.mean()
    return float(np.dot(kc, seg - seg.mean()) / np.dot(kc, kc))


def lyapunov_rosenstein(
    series,
    m: int = 3,
    tau_lag: int = 5,
    dt: float | None = None,
    k_max: int = 100,
    theiler: int | None = None,
    fit_range: tuple | None = None,
) -> LyapunovEstimate:
    """Largest Lyapunov exponent from nearest-neighbour divergence.

    The series is delay embedded, each point is paired with its nearest
    neighbour further than ``theiler`` samples away in time, and the mean
    log-distance of the pairs is tracked for ``k = 0..k_max`` steps.  The
    exponent is the least-squares slope of that curve over ``fit_range``,
    divided by ``dt``.

    Parameters
    ----------
    series : array_like or TimeSeries
        Scalar series.  A multi-column array is used as a state-space
        reconstruction directly (``m`` and ``tau_lag`` are then ignored).
    m, tau_lag : int
        Embedding dimension and lag.
    dt : float, optional
        Sample spacing.  Defaults to ``series.dt`` or 1.
    k_max : int
        Longest divergence horizon in samples.
    theiler : int, optional
        Temporal exclusion window, ``m * tau_lag`` by default.
    fit_range : (int, int), optional
        Inclusive step range for the slope, ``(1, k_max // 2)`` by default.

    Returns
    -------
    LyapunovEstimate
    """
    if dt is None:
        dt = series.dt if isinstance(series, TimeSeries) else 1.0
    raw = as_array(series)
    if raw.ndim == 2 and raw.shape[1] > 1:
        points = np.asarray(raw, dtype=float)
        if theiler is None:
            theiler = 1
    else:
        points = delay_embed(_scalar(raw), m, tau_lag)
        if theiler is None:
            theiler = m * tau_lag
    if fit_range is None:
        fit_range = (1, max(1, k_max // 2))
    lo, hi = int(fit_range[0]), int(fit_range[1])
    if not 0 <= lo < hi <= k_max:
        raise ValueError("fit_range must satisfy 0 <= lo < hi <= k_max")
    curve = _divergence_curve(points, k_max, int(theiler))
    slope = _ols_slope(curve, lo, hi) / dt
    early = curve[: min(len(curve), max(lo, 1) + 5)]
    low_conf = bool(np.any(np.diff(early) < 0))
    if low_conf:
        warnings.warn("early divergence is not monotone; estimate is low confidence", LowConfidenceWarning, stacklevel=2)
    return LyapunovEstimate(slope, (lo, hi), "rosenstein", low_conf, curve)


def mean_period(series) -> float:
    """Mean oscillation period in samples, from the power-weighted mean frequency."""
    x = _scalar(series)
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x))
    power[0] = 0.0
    if power.sum() == 0:
        raise EstimationError("constant series has no period")
    return float(1.0 / (np.sum(freqs * power) / np.sum(power)))


def autocorrelation_lag(series, threshold: float = 1.0 - 1.0 / math.e) -> int:
    """First lag at which the autocorrelation drops below ``threshold``."""
    x = _scalar(series)
    x = x - x.mean()
    n = len(x)
    spec = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(spec * np.conj(spec))[:n]
    if acf[0] == 0:
        raise EstimationError("constant series has no autocorrelation scale")
    acf = acf / acf[0]
    below = np.flatnonzero(acf < threshold)
    return int(below[0]) if below.size else n - 1


def lyapunov_rosenstein_auto(series, dt: float | None = None, m: int = 3) -> LyapunovEstimate:
    """Rosenstein estimate with data-driven settings.

    The lag is where the autocorrelation falls to ``1 - 1/e``, the Theiler
    window is one mean period ``P``, and the slope is fitted on steps
    ``[P/2, 2P]``, the early linear part of the divergence curve for
    band-limited chaotic flows.
    """
    x = _scalar(series)
    if dt is None:
        dt = series.dt if isinstance(series, TimeSeries) else 1.0
    period = mean_period(x)
    lag = max(1, autocorrelation_lag(x))
    k_max = max(4, int(round(2 * period)))
    lo = max(1, int(round(period / 2)))
    return lyapunov_rosenstein(
        x, m=m, tau_lag=lag, dt=dt, k_max=k_max, theiler=int(round(period)), fit_range=(lo, k_max)
    )


def lyapunov_wolf(
    series,
    m: int = 3,
    tau_lag: int = 5,
    dt: float | None = None,
    evolve_steps: int = 10,
    replace_threshold: float | None = None,
    theiler: int | None = None,
    min_distance: float | None = None,
) -> LyapunovEstimate:
    """Largest Lyapunov exponent by following and renormalising one pair.

    A reference trajectory point and its nearest admissible neighbour are
    evolved for ``evolve_steps`` samples.  The log growth of their separation
    is accumulated.  Whenever the separation exceeds ``replace_threshold`` a
    new neighbour is chosen among points closer than the threshold that best
    preserves the direction of the old separation vector.

    Parameters
    ----------
    replace_threshold : float, optional
        Absolute distance; defaults to 10% of the embedded attractor's
        standard deviation times ``sqrt(m)``.
    min_distance : float, optional
        Candidates closer than this are ignored (noise floor); defaults to
        ``1e-3 * replace_threshold``.

    Raises
    ------
    EstimationError
        If fewer than three renormalisation segments are completed.
    """
    if dt is None:
        dt = series.dt if isinstance(series, TimeSeries) else 1.0
    x = _scalar(series)
    pts = delay_embed(x, m, tau_lag)
    if theiler is None:
        theiler = m * tau_lag
    scale = float(np.sqrt(np.sum(np.var(pts, axis=0))))
    if scale == 0.0:
        raise EstimationError("constant series has no admissible neighbours")
    if replace_threshold is None:
        replace_threshold = 0.1 * scale
    if min_distance is None:
        min_distance = 1e-3 * replace_threshold
    n = len(pts)
    idx = np.arange(n)

    def candidates(i, limit):
        d = np.linalg.norm(pts - pts[i], axis=1)
        ok = (np.abs(idx - i) > theiler) & (d > min_distance) & (idx + evolve_steps < n)
        if limit is not None:
            ok &= d < limit
        return np.flatnonzero(ok), d

    ref = 0
    cand, d = candidates(ref, None)
    if cand.size == 0:
        raise EstimationError("no admissible neighbour at nonzero distance")
    nb = cand[np.argmin(d[cand])]
    total = 0.0
    segments = 0
    first = ref
    while ref + evolve_steps < n and nb + evolve_steps < n:
        d0 = np.linalg.norm(pts[nb] - pts[ref])
        ref_next, nb_next = ref + evolve_steps, nb + evolve_steps
        sep = pts[nb_next] - pts[ref_next]
        d1 = np.linalg.norm(sep)
        if d0 <= 0 or d1 <= 0:
            break
        total += math.log(d1 / d0)
        segments += 1
        ref = ref_next
        if ref + evolve_steps >= n:
            break
        if d1 > replace_threshold:
            cand, d = candidates(ref, replace_threshold)
            if cand.size == 0:
                cand, d = candidates(ref, None)
                if cand.size == 0:
                    break
                nb = cand[np.argmin(d[cand])]
                continue
            vec = pts[cand] - pts[ref]
            cosang = vec @ sep / (np.linalg.norm(vec, axis=1) * d1)
            angle = np.arccos(np.clip(cosang, -1.0, 1.0))
            order = np.lexsort((d[cand], np.round(angle, 12)))
            nb = cand[order[0]]
        else:
            nb = nb_next
    if segments < 3:
        raise EstimationError(f"only {segments} renormalisation segments completed")
    elapsed = segments * evolve_steps * dt
    return LyapunovEstimate(total / elapsed, (first, segments - 1), "wolf")


def lyapunov_wolf_auto(series, dt: float | None = None, m: int = 3) -> LyapunovEstimate:
    """Pair-tracking estimate with data-driven settings.

    Lag and evolution length both equal the ``1 - 1/e`` autocorrelation lag,
    the Theiler window is one mean period and the replacement threshold is
    10% of the embedded attractor scale.
    """
    x = _scalar(series)
    if dt is None:
        dt = series.dt if isinstance(series, TimeSeries) else 1.0
    lag = max(1, autocorrelation_lag(x))
    period = mean_period(x)
    scale = math.sqrt(m) * float(np.std(x))
    return lyapunov_wolf(x, m, lag, dt, evolve_steps=lag, replace_threshold=0.1 * scale, theiler=int(round(period)))


class ClampWarning(UserWarning):
    """A logarithm argument was clamped away from zero."""


def logistic_lyapunov(r: float, x0: float = 0.4, n: int = 10000, transient: int = 1000) -> float:
    """Lyapunov exponent of the logistic map from its derivative.

    Returns the orbit average of ``ln|r - 2 r x|``.  Terms with a zero
    derivative are clamped at ``1e-300`` and reported with a
    :class:`ClampWarning`.
    """
    if not 0.0 <= r <= 4.0:
        raise ValueError(f"r must lie in [0, 4], got {r}")
    x = float(x0)
    for _ in range(transient):
        x = r * x * (1.0 - x)
    acc = 0.0
    clamped = False
    for _ in range(n):
        deriv = abs(r - 2.0 * r * x)
        if deriv < 1e-300:
            deriv = 1e-300
            clamped = True
        acc += math.log(deriv)
        x = r * x * (1.0 - x)
    if clamped:
        warnings.warn("derivative vanished on the orbit; term clamped", ClampWarning, stacklevel=2)
    return acc / n


# ---------------------------------------------------------------------------
# FTLE
# ---------------------------------------------------------------------------


@dataclass
class FtleField:
    """Finite-time Lyapunov exponents on an ``(x, z)`` grid with ``y = 0``.

    ``grid[i, j]`` belongs to ``x_axis[i]`` and ``z_axis[j]``; NaN marks cells
    whose integration failed.
    """

    grid: np.ndarray
    x_axis: np.ndarray
    z_axis: np.ndarray
    horizon: float
    delta: float

    def __post_init__(self):
        if self.grid.shape != (len(self.x_axis), len(self.z_axis)):
            raise ValueError("grid shape does not match axes")
        if self.horizon <= 0 or self.delta <= 0:
            raise ValueError("horizon and delta must be positive")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,z,ftle\n")
            for i, xv in enumerate(self.x_axis):
                for j, zv in enumerate(self.z_axis):
                    fh.write(f"{xv!r},{zv!r},{self.grid[i, j]!r}\n")


def ftle_field(spec, x_range, z_range, resolution=(41, 41), T: float = 2.0, delta: float = 1e-6, dt: float = 0.01) -> FtleField:
    """FTLE of a 3-D flow over a slice of initial conditions.

    Each cell ``(x, 0, z)`` is integrated together with a copy displaced by
    ``delta`` along the first axis; the cell value is
    ``ln(|separation(T)| / delta) / T``.
    """
    if getattr(spec, "dim", None) != 3:
        raise ValueError("ftle_field needs a 3-D flow")
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    nx, nz = resolution
    if nx < 2 or nz < 2:
        raise ValueError("resolution must be at least 2 per axis")
    xs = np.linspace(x_range[0], x_range[1], nx)
    zs = np.linspace(z_range[0], z_range[1], nz)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    base = np.stack([gx, np.zeros_like(gx), gz], axis=-1).reshape(-1, 3)
    pert = base.copy()
    pert[:, 0] += delta
    state = np.concatenate([base, pert])
    alive = np.ones(len(state), dtype=bool)
    n_steps = int(round(T / dt))
    step = T / n_steps
    with np.errstate(all="ignore"):
        for _ in range(n_steps):
            k1 = spec.rhs(state)
            k2 = spec.rhs(state + 0.5 * step * k1)
            k3 = spec.rhs(state + 0.5 * step * k2)
            k4 = spec.rhs(state + step * k3)
            state = state + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = ~np.all(np.isfinite(state), axis=1) | np.any(np.abs(state) > 1e6, axis=1)
            alive &= ~bad
            state[bad] = 0.0
    n = len(base)
    sep = np.linalg.norm(state[n:] - state[:n], axis=1)
    ok = alive[:n] & alive[n:] & (sep > 0)
    values = np.full(n, np.nan)
    values[ok] = np.log(sep[ok] / delta) / T
    return FtleField(values.reshape(nx, nz), xs, zs, T, delta)


# ---------------------------------------------------------------------------
# Logistic bifurcation scan
# ---------------------------------------------------------------------------


def bifurcation_scan(r_min: float = 2.5, r_max: float = 4.0, n_r: int = 301, transient: int = 1000, n_keep: int = 200, x0: float = 0.4):
    """Long-run logistic iterates for evenly spaced ``r``.

    Returns a list of ``(r, values)`` pairs; ``values`` holds the last
    ``n_keep`` iterates after ``transient`` have been discarded.
    """
    if not 0.0 <= r_min < r_max <= 4.0:
        raise ValueError("need 0 <= r_min < r_max <= 4")
    rs = np.linspace(r_min, r_max, n_r)
    x = np.full(n_r, float(x0))
    for _ in range(transient):
        x = rs * x * (1.0 - x)
    kept = np.empty((n_r, n_keep))
    for i in range(n_keep):
        kept[:, i] = x
        x = rs * x * (1.0 - x)
    return [(float(r), kept[i].copy()) for i, r in enumerate(rs)]


# ---------------------------------------------------------------------------
# Symbolic and entropy diagnostics
# ---------------------------------------------------------------------------


def _ordinal_codes(x: np.ndarray, d: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, d)
    ranks = np.argsort(windows, axis=1, kind="stable")
    weights = d ** np.arange(d - 1, -1, -1)
    return ranks @ weights


def _shannon(counts: np.ndarray) -> float:
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def permutation_entropy(series, d: int = 3, window: int | None = None):
    """Shannon entropy (natural log) of ordinal patterns of length ``d``.

    Ties are ranked by index, earlier first, so a constant window maps to
    a single pattern.  With ``window`` set, returns the entropy of every
    length-``window`` sliding segment.
    """
    if not 2 <= d <= 7:
        raise ValueError("pattern length d must be in 2..7")
    x = _scalar(series)
    if len(x) < d:
        raise ValueError("series shorter than the pattern length")
    codes = _ordinal_codes(x, d)
    if window is None:
        _, counts = np.unique(codes, return_counts=True)
        return _shannon(counts)
    if window < d:
        raise ValueError("window shorter than the pattern length")
    per_window = window - d + 1
    out = []
    for start in range(0, len(codes) - per_window + 1):
        _, counts = np.unique(codes[start : start + per_window], return_counts=True)
        out.append(_shannon(counts))
    return np.asarray(out)


def sliding_entropy(series, window: int, bins: int) -> np.ndarray:
    """Histogram entropy of each sliding window.

    Each window is binned into ``bins`` equal-width bins over its own range.
    A window with zero range has entropy 0.
    """
    if bins < 2 or window < bins:
        raise ValueError("need window >= bins >= 2")
    x = _scalar(series)
    if len(x) < window:
        raise ValueError("series shorter than window")
    out = np.empty(len(x) - window + 1)
    for i in range(len(out)):
        w = x[i : i + window]
        lo, hi = w.min(), w.max()
        if hi == lo:
            out[i] = 0.0
            continue
        counts, _ = np.histogram(w, bins=bins, range=(lo, hi))
        out[i] = _shannon(counts)
    return out


def recurrence_density(states, epsilon: float) -> np.ndarray:
    """Fraction of time steps whose state lies within ``epsilon`` of ``x(t)``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    X = np.asarray(states, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    T = len(X)
    sq = np.einsum("ij,ij->i", X, X)
    out = np.empty(T)
    for start in range(0, T, 1024):
        stop = min(start + 1024, T)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * X[start:stop] @ X.T
        d2[np.arange(stop - start), np.arange(start, stop)] = 0.0
        out[start:stop] = np.count_nonzero(d2 < epsilon**2, axis=1) / T
    return out


def symbolic_derivative(series, epsilon: float = 0.0) -> np.ndarray:
    """Rising (+1), falling (-1) or neutral (0) steps, thresholded at ``epsilon``."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    diff = np.diff(_scalar(series))
    out = np.zeros(len(diff), dtype=int)
    out[diff > epsilon] = 1
    out[diff < -epsilon] = -1
    return out


def input_state_xcorr(states, inputs, max_lag: int, return_flags: bool = False):
    """Pearson correlation of every state column with lagged input.

    Entry ``(i, tau)`` correlates ``x_i(t)`` with ``u(t - tau)`` over the
    overlapping indices.  Zero-variance pairs get 0 and are flagged.
    """
    X = np.asarray(states, dtype=float)
    u = _scalar(inputs)
    T = len(u)
    if X.shape[0] != T:
        raise ValueError("states and input must have the same length")
    if not 0 <= max_lag < T:
        raise ValueError("max_lag must be in [0, T)")
    N = X.shape[1]
    out = np.zeros((N, max_lag + 1))
    flags = np.zeros((N, max_lag + 1), dtype=bool)
    for tau in range(max_lag + 1):
        xs = X[tau:]
        us = u[: T - tau]
        xc = xs - xs.mean(axis=0)
        uc = us - us.mean()
        den = np.sqrt(np.sum(xc**2, axis=0) * np.sum(uc**2))
        good = den > 0
        out[good, tau] = (uc @ xc)[good] / den[good]
        flags[~good, tau] = True
    if flags.any():
        logger.info("input_state_xcorr: %d zero-variance entries set to 0", int(flags.sum()))
    return (out, flags) if return_flags else out
