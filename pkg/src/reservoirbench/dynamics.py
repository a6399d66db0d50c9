"""Ground-truth trajectories for the benchmark dynamical systems.

Every continuous-time flow is integrated with classical fixed-step RK4 at the
sampling step itself.  The Mackey-Glass delay equation keeps a ring buffer of
past samples and reads the delayed value by linear interpolation.  The
logistic map is handled as the discrete ``dt = 1`` case.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "IntegrationError",
    "Lorenz",
    "Rossler",
    "Chen",
    "Chua",
    "MackeyGlass",
    "Logistic",
    "LinearField",
    "SamplingPlan",
    "TimeSeries",
    "chua_nonlinearity",
    "rk4_step",
    "simulate",
    "logistic_orbit",
    "delay_embed",
    "system_from_dict",
    "system_to_dict",
]

BLOWUP_THRESHOLD = 1e6


class IntegrationError(RuntimeError):
    """Raised when a trajectory leaves the finite, bounded regime.

    Attributes
    ----------
    step : int
        Index of the integration step that produced the offending state.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


# ---------------------------------------------------------------------------
# System definitions
# ---------------------------------------------------------------------------


def _check_finite(**params):
    for name, value in params.items():
        if not math.isfinite(value):
            raise ValueError(f"parameter {name} must be finite, got {value}")


@dataclass(frozen=True)
class Lorenz:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    name = "lorenz"
    dim = 3

    def __post_init__(self):
        _check_finite(sigma=self.sigma, rho=self.rho, beta=self.beta)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack(
            [
                self.sigma * (x2 - x1),
                x1 * (self.rho - x3) - x2,
                x1 * x2 - self.beta * x3,
            ],
            axis=-1,
        )


@dataclass(frozen=True)
class Rossler:
    a: float = 0.2
    b: float = 0.2
    c: float = 5.7

    name = "rossler"
    dim = 3

    def __post_init__(self):
        _check_finite(a=self.a, b=self.b, c=self.c)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack(
            [-(x2 + x3), x1 + self.a * x2, self.b + x3 * (x1 - self.c)], axis=-1
        )


@dataclass(frozen=True)
class Chen:
    """Chen attractor, ``dy/dt = (c - a) x - x z + c y``."""

    a: float = 35.0
    b: float = 3.0
    c: float = 28.0

    name = "chen"
    dim = 3

    def __post_init__(self):
        _check_finite(a=self.a, b=self.b, c=self.c)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack(
            [
                self.a * (x2 - x1),
                (self.c - self.a) * x1 - x1 * x3 + self.c * x2,
                x1 * x2 - self.b * x3,
            ],
            axis=-1,
        )


def chua_nonlinearity(x, m0: float, m1: float):
    """Piecewise-linear resistor characteristic.

    Slope ``m0`` on ``|x| < 1`` and ``m1`` outside, continuous and odd.
    """
    x = np.asarray(x, dtype=float)
    return m1 * x + 0.5 * (m0 - m1) * (np.abs(x + 1.0) - np.abs(x - 1.0))


@dataclass(frozen=True)
class Chua:
    alpha: float = 9.0
    beta: float = 14.0
    m0: float = -1.143
    m1: float = -0.714

    name = "chua"
    dim = 3

    def __post_init__(self):
        _check_finite(alpha=self.alpha, beta=self.beta, m0=self.m0, m1=self.m1)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        f = chua_nonlinearity(x1, self.m0, self.m1)
        return np.stack(
            [self.alpha * (x2 - x1 - f), x1 - x2 + x3, -self.beta * x2], axis=-1
        )


@dataclass(frozen=True)
class MackeyGlass:
    """Mackey-Glass delay equation ``dx/dt = beta x_d / (1 + x_d^n) - gamma x``."""

    beta: float = 0.2
    gamma: float = 0.1
    n: float = 10.0
    tau_delay: float = 17.0

    name = "mackey_glass"
    dim = 1

    def __post_init__(self):
        _check_finite(beta=self.beta, gamma=self.gamma, n=self.n, tau_delay=self.tau_delay)
        if self.tau_delay <= 0:
            raise ValueError("tau_delay must be positive")

    def rhs_delayed(self, x: np.ndarray, x_delayed: float) -> np.ndarray:
        return self.beta * x_delayed / (1.0 + x_delayed**self.n) - self.gamma * x


@dataclass(frozen=True)
class Logistic:
    r: float = 3.9

    name = "logistic"
    dim = 1

    def __post_init__(self):
        _check_finite(r=self.r)
        if not 0.0 <= self.r <= 4.0:
            raise ValueError(f"logistic parameter r must lie in [0, 4], got {self.r}")


@dataclass(frozen=True)
class LinearField:
    """Uncoupled linear flow ``dx/dt = rate * x``; handy as an exact test field."""

    rate: float = 1.0
    dim: int = 3

    name = "linear"

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return self.rate * x


_SYSTEMS = {
    "lorenz": Lorenz,
    "rossler": Rossler,
    "chen": Chen,
    "chua": Chua,
    "mackey_glass": MackeyGlass,
    "logistic": Logistic,
    "linear": LinearField,
}


def system_from_dict(doc: dict):
    """Build a system from ``{"system": name, "params": {...}}``."""
    name = doc.get("system")
    if name not in _SYSTEMS:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(_SYSTEMS)}")
    params = dict(doc.get("params") or {})
    try:
        return _SYSTEMS[name](**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {name}: {exc}") from None


def system_to_dict(spec) -> dict:
    params = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    return {"system": spec.name, "params": params}


# ---------------------------------------------------------------------------
# Time series containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingPlan:
    """How a trajectory is sampled.

    Attributes
    ----------
    dt : float
        Integration and sampling step.
    n_total : int
        Number of samples kept after the washout.
    washout : int
        Leading steps that are integrated and discarded.
    x0 : tuple of float
        Initial state.
    """

    dt: float = 0.02
    n_total: int = 8000
    washout: int = 2000
    x0: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_total <= 0:
            raise ValueError("n_total must be positive")
        if self.washout < 0:
            raise ValueError("washout must be non-negative")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))


@dataclass
class TimeSeries:
    """Uniformly sampled ``T x d`` real matrix with its step size and label."""

    data: np.ndarray
    dt: float
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError("time series data must be a non-empty T x d matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("time series contains non-finite entries")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.data = data

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def to_csv(self, path) -> None:
        """Write ``t,x0,...,x{d-1}`` rows with ``t = index * dt``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"x{i}" for i in range(self.dim)])
            for t, row in zip(self.times, self.data):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, name: str = "") -> "TimeSeries":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        if header[0] != "t":
            raise ValueError("CSV must start with a 't' column")
        dt = float(body[1, 0] - body[0, 0]) if len(body) > 1 else 1.0
        return cls(body[:, 1:], dt, name or str(path))

    def to_record(self) -> dict:
        return {"name": self.name, "dt": self.dt, "data": self.data.tolist()}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_record(), fh)

    @classmethod
    def from_record(cls, record: dict) -> "TimeSeries":
        return cls(np.asarray(record["data"], dtype=float), float(record["dt"]), record.get("name", ""))


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------


def rk4_step(spec, x, dt: float) -> np.ndarray:
    """Advance ``x`` by one classical RK4 step of ``spec``'s vector field.

    Parameters
    ----------
    spec : system definition
        Any object exposing ``rhs(x)``; batched states of shape ``(..., d)`` are
        allowed.
    x : array_like
        Current state.
    dt : float
        Step size.

    Raises
    ------
    IntegrationError
        If the result is non-finite or exceeds the blow-up threshold.
    """
    if isinstance(spec, (Logistic, MackeyGlass)):
        raise TypeError(f"{spec.name} is not a plain flow; use simulate()")
    x = np.asarray(x, dtype=float)
    k1 = spec.rhs(x)
    k2 = spec.rhs(x + 0.5 * dt * k1)
    k3 = spec.rhs(x + 0.5 * dt * k2)
    k4 = spec.rhs(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)) or np.any(np.abs(out) > BLOWUP_THRESHOLD):
        raise IntegrationError("state blew up", 0)
    return out


def _simulate_flow(spec, plan: SamplingPlan) -> np.ndarray:
    x = np.asarray(plan.x0, dtype=float)
    if x.shape != (spec.dim,):
        raise ValueError(f"{spec.name} needs a {spec.dim}-dimensional x0, got {x.shape}")
    total = plan.washout + plan.n_total
    out = np.empty((plan.n_total, spec.dim))
    for i in range(total):
        if i >= plan.washout:
            out[i - plan.washout] = x
        if i == total - 1:
            break
        try:
            x = rk4_step(spec, x, plan.dt)
        except IntegrationError:
            raise IntegrationError(f"{spec.name} integration failed", i + 1) from None
    return out


class _DelayBuffer:
    """Ring buffer of past samples with linear interpolation."""

    def __init__(self, x0: float, dt: float, delay: float):
        self.dt = dt
        self.size = int(math.ceil(delay / dt)) + 2
        self.buf = np.full(self.size, x0, dtype=float)
        self.count = 1  # samples written so far, index of newest is count - 1
        self.x0 = x0

    def push(self, value: float) -> None:
        self.buf[self.count % self.size] = value
        self.count += 1

    def value_at(self, t: float) -> float:
        """History value at absolute time ``t`` (constant ``x0`` for ``t <= 0``)."""
        if t <= 0.0:
            return self.x0
        pos = t / self.dt
        lo = int(math.floor(pos))
        frac = pos - lo
        newest = self.count - 1
        lo = min(lo, newest)
        hi = min(lo + 1, newest)
        if newest - lo >= self.size:
            raise RuntimeError("delay buffer too short")
        a = self.buf[lo % self.size]
        b = self.buf[hi % self.size]
        return a + frac * (b - a)


def _simulate_mackey_glass(spec: MackeyGlass, plan: SamplingPlan) -> np.ndarray:
    if len(plan.x0) != 1:
        raise ValueError("Mackey-Glass needs a scalar x0")
    x = float(plan.x0[0])
    dt = plan.dt
    hist = _DelayBuffer(x, dt, spec.tau_delay)
    total = plan.washout + plan.n_total
    out = np.empty((plan.n_total, 1))
    for i in range(total):
        if i >= plan.washout:
            out[i - plan.washout, 0] = x
        if i == total - 1:
            break
        xd = hist.value_at(i * dt - spec.tau_delay)
        k1 = spec.rhs_delayed(x, xd)
        k2 = spec.rhs_delayed(x + 0.5 * dt * k1, xd)
        k3 = spec.rhs_delayed(x + 0.5 * dt * k2, xd)
        k4 = spec.rhs_delayed(x + dt * k3, xd)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not math.isfinite(x) or abs(x) > BLOWUP_THRESHOLD:
            raise IntegrationError("mackey_glass integration failed", i + 1)
        hist.push(x)
    return out


def _logistic_iterates(r: float, x0: float, n: int, transient: int) -> np.ndarray:
    x = float(x0)
    for _ in range(transient):
        x = r * x * (1.0 - x)
    out = np.empty(n)
    for i in range(n):
        out[i] = x
        x = r * x * (1.0 - x)
    return out


def simulate(spec, plan: SamplingPlan) -> TimeSeries:
    """Sample a trajectory of ``spec`` according to ``plan``.

    The first retained row is the state after ``plan.washout`` steps.  With
    ``washout=0`` and ``n_total=1`` the single row is ``x0`` itself.
    """
    if isinstance(spec, Logistic):
        data = _logistic_iterates(spec.r, plan.x0[0], plan.n_total, plan.washout)[:, None]
        dt = 1.0
    elif isinstance(spec, MackeyGlass):
        data = _simulate_mackey_glass(spec, plan)
        dt = plan.dt
    else:
        data = _simulate_flow(spec, plan)
        dt = plan.dt
    return TimeSeries(data, dt, spec.name)


def logistic_orbit(r: float, x0: float = 0.4, n: int = 1000, transient: int = 0) -> TimeSeries:
    """Iterates of ``x -> r x (1 - x)`` after discarding ``transient`` of them."""
    if not 0.0 <= r <= 4.0:
        raise ValueError(f"r must lie in [0, 4], got {r}")
    if not 0.0 <= x0 <= 1.0:
        raise ValueError("x0 must lie in [0, 1]")
    return TimeSeries(_logistic_iterates(r, x0, n, transient), 1.0, f"logistic(r={r})")


def delay_embed(series, m: int, tau_lag: int) -> np.ndarray:
    """Delay-coordinate embedding.

    Row ``n`` is ``(x[n], x[n + tau], ..., x[n + (m - 1) tau])``.

    Parameters
    ----------
    series : array_like or TimeSeries
        Scalar series.
    m : int
        Embedding dimension.
    tau_lag : int
        Lag in samples.
    """
    x = series.data if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError("delay_embed expects a scalar series")
        x = x[:, 0]
    if m < 1 or tau_lag < 1:
        raise ValueError("m and tau_lag must be >= 1")
    span = (m - 1) * tau_lag
    if len(x) <= span:
        raise ValueError(f"series too short: need more than {span} samples, got {len(x)}")
    rows = len(x) - span
    return np.stack([x[i * tau_lag : i * tau_lag + rows] for i in range(m)], axis=1)


def as_array(series: "TimeSeries | np.ndarray | Sequence[float]") -> np.ndarray:
    if isinstance(series, TimeSeries):
        return series.data
    return np.asarray(series, dtype=float)
