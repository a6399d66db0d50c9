"""Training one-step forecasters and running them open or closed loop.

A :class:`TrainedModel` pairs a reservoir config with a ridge readout that
maps reservoir features at time ``t`` to the input at ``t + 1``.  Data are
z-scored with training-segment statistics before entering the reservoir and
predictions are mapped back to the original units.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .readout import ReadoutWeights, expand_features, fit_ridge
from .reservoir import (
    ParallelReservoir,
    ReservoirConfig,
    build_reservoir,
    config_from_dict,
    config_to_dict,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrainedModel",
    "ForecastResult",
    "MCResult",
    "train_one_step_model",
    "open_loop",
    "closed_loop",
    "memory_capacity",
    "DIVERGENCE_THRESHOLD",
]

# predictions beyond this many training standard deviations count as diverged
DIVERGENCE_THRESHOLD = 1e6


@dataclass
class TrainedModel:
    """Reservoir config, fitted readout and the data normalisation.

    Attributes
    ----------
    config : ReservoirConfig
    readout : ReadoutWeights
    degree : int
        Feature-map degree (1, 2 or 3).
    include_bias : bool
    warmup : int
        Steps discarded before the readout sees reservoir states.
    mean, scale : ndarray
        Per-channel normalisation of inputs and outputs.
    readout_mode : str
        ``"global"`` or ``"local"`` (one readout per parallel member).
    """

    config: ReservoirConfig
    readout: ReadoutWeights
    degree: int = 1
    include_bias: bool = True
    warmup: int = 100
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    scale: np.ndarray = field(default_factory=lambda: np.ones(1))
    readout_mode: str = "global"

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        F = self.readout.W_out.shape[1]
        expected = self.reservoir.n_states * self.degree + int(self.include_bias)
        if F != expected:
            raise ValueError(f"readout has {F} features, the reservoir and feature map give {expected}")

    @property
    def n_inputs(self) -> int:
        return self.mean.size

    @property
    def reservoir(self):
        return build_reservoir(self.config, self.mean.size)

    def normalize(self, data) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.mean) / self.scale

    def denormalize(self, data) -> np.ndarray:
        return np.asarray(data, dtype=float) * self.scale + self.mean

    def features(self, states) -> np.ndarray:
        return expand_features(states, self.degree, self.include_bias).X

    def to_dict(self) -> dict:
        return {
            "reservoir": config_to_dict(self.config),
            "readout": self.readout.to_dict(),
            "degree": self.degree,
            "include_bias": self.include_bias,
            "warmup": self.warmup,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "readout_mode": self.readout_mode,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainedModel":
        return cls(
            config_from_dict(doc["reservoir"]),
            ReadoutWeights.from_dict(doc["readout"]),
            int(doc["degree"]),
            bool(doc["include_bias"]),
            int(doc["warmup"]),
            np.asarray(doc["mean"], dtype=float),
            np.asarray(doc["scale"], dtype=float),
            doc.get("readout_mode", "global"),
        )


@dataclass
class ForecastResult:
    """Predicted rows with optional aligned targets.

    ``divergence_step`` is the index of the first non-finite or runaway
    prediction; from there on rows repeat the last finite prediction.
    """

    predictions: np.ndarray
    mode: str
    horizon: int
    targets: np.ndarray | None = None
    divergence_step: int | None = None

    def to_csv(self, path) -> None:
        """Write ``step,pred_0..,true_0..`` rows."""
        d = self.predictions.shape[1] if self.predictions.ndim == 2 else 0
        header = ["step"] + [f"pred_{i}" for i in range(d)]
        if self.targets is not None:
            header += [f"true_{i}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.horizon):
                row = [k] + [repr(float(v)) for v in self.predictions[k]]
                if self.targets is not None:
                    row += [repr(float(v)) for v in self.targets[k]]
                w.writerow(row)


def _as_matrix(data) -> np.ndarray:
    A = np.asarray(getattr(data, "data", data), dtype=float)
    return A[:, None] if A.ndim == 1 else A


def _local_readout(res: ParallelReservoir, states, targets, degree, include_bias, beta) -> ReadoutWeights:
    """Block readout: member ``i`` predicts only its own input group."""
    N = res.n_states
    F = N * degree + int(include_bias)
    W = np.zeros((targets.shape[1], F))
    for (lo, hi), group in zip(res.state_blocks(), res.groups):
        cols = [np.arange(p * N + lo, p * N + hi) for p in range(degree)]
        if include_bias:
            cols.append(np.array([F - 1]))
        cols = np.concatenate(cols)
        X = expand_features(states[:, lo:hi], degree, include_bias).X
        W[np.ix_(group, cols)] = fit_ridge(X, targets[:, group], beta).W_out
    return ReadoutWeights(W, beta)


def train_one_step_model(
    dataset,
    config: ReservoirConfig,
    beta: float = 1e-4,
    split=(4500, 100, 3500),
    degree: int = 1,
    include_bias: bool = True,
    readout_mode: str = "global",
    normalize: bool = True,
) -> TrainedModel:
    """Fit a readout that predicts the next sample from the reservoir state.

    The first ``split[0]`` rows of ``dataset`` form the training segment.
    The reservoir is driven by rows ``0..train-2`` from a zero state, the
    first ``split[1]`` states are discarded, and ridge regression maps the
    remaining states to rows ``warmup+1..train-1``.
    """
    data = _as_matrix(dataset)
    train, warmup, test = split
    if train + test > len(data):
        raise ValueError(f"split {split} needs {train + test} rows, dataset has {len(data)}")
    if not 0 <= warmup < train - 1:
        raise ValueError("warmup must be smaller than the training length")
    seg = data[:train]
    if normalize:
        mean = seg.mean(axis=0)
        scale = seg.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean = np.zeros(seg.shape[1])
        scale = np.ones(seg.shape[1])
    z = (seg - mean) / scale
    res = build_reservoir(config, z.shape[1])
    states = res.run(z[:-1], warmup).states
    targets = z[warmup + 1 :]
    if readout_mode == "local":
        if not isinstance(res, ParallelReservoir):
            raise ValueError("local readouts need a parallel reservoir")
        readout = _local_readout(res, states, targets, degree, include_bias, beta)
    elif readout_mode == "global":
        readout = fit_ridge(expand_features(states, degree, include_bias), targets, beta)
    else:
        raise ValueError("readout_mode must be 'global' or 'local'")
    return TrainedModel(config, readout, degree, include_bias, warmup, mean, scale, readout_mode)


def open_loop(model: TrainedModel, inputs, targets=None, priming=None) -> ForecastResult:
    """Teacher-forced prediction: every step is driven by the true input.

    Row ``k`` of the result is the prediction made after consuming
    ``inputs[k]``.  ``priming`` rows, if given, are fed first from a zero
    state and produce no output.
    """
    U = model.normalize(_as_matrix(inputs))
    n_prime = 0
    if priming is not None:
        P = model.normalize(_as_matrix(priming))
        n_prime = len(P)
        U = np.vstack([P, U])
    states = model.reservoir.run(U, n_prime).states
    pred = model.denormalize(model.readout.predict(model.features(states)))
    T = None if targets is None else _as_matrix(targets)
    return ForecastResult(pred, "open", len(pred), T)


def closed_loop(model: TrainedModel, priming_inputs, horizon: int, targets=None) -> ForecastResult:
    """Autoregressive prediction fed by its own outputs.

    The reservoir is driven by ``priming_inputs`` from a zero state; the
    prediction after the last priming row is the first output, and each
    output is then fed back as the next input.
    """
    P = model.normalize(_as_matrix(priming_inputs))
    if len(P) < max(1, model.warmup):
        raise ValueError(f"priming needs at least {model.warmup} rows")
    d = P.shape[1]
    if horizon <= 0:
        return ForecastResult(np.empty((0, d)), "closed", 0, None if targets is None else _as_matrix(targets)[:0])
    res = model.reservoir
    state = res.run(P, len(P) - 1).final_state
    W = model.readout.W_out
    out = np.empty((horizon, d))
    diverged = None
    last = None
    for k in range(horizon):
        y = model.features(state[None, :])[0] @ W.T
        if diverged is None and (not np.all(np.isfinite(y)) or np.max(np.abs(y)) > DIVERGENCE_THRESHOLD):
            diverged = k
        if diverged is not None:
            out[k:] = last if last is not None else np.nan
            break
        out[k] = y
        last = y
        if k + 1 < horizon:
            try:
                state = res.step(state, y)
            except Exception:
                diverged = k + 1
                out[k + 1 :] = last
                break
    pred = model.denormalize(out)
    T = None if targets is None else _as_matrix(targets)[:horizon]
    if diverged is not None:
        logger.info("closed loop diverged at step %d", diverged)
    return ForecastResult(pred, "closed", horizon, T, diverged)


@dataclass
class MCResult:
    """Per-delay recall scores and their sum over delays ``>= 1``."""

    delays: np.ndarray
    r2: np.ndarray
    total: float

    def to_csv(self, path, include_zero: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "r2"])
            for tau, r in zip(self.delays, self.r2):
                if tau == 0 and not include_zero:
                    continue
                w.writerow([int(tau), repr(float(r))])


def memory_capacity(
    config: ReservoirConfig,
    beta: float = 1e-8,
    tau_max: int = 40,
    T: int = 4000,
    seed: int = 0,
    washout: int = 200,
    test_fraction: float = 0.3,
    amplitude: float = 1.0,
) -> MCResult:
    """Linear recall of delayed i.i.d. inputs from the current state.

    The reservoir is driven by ``T`` uniform ``[-amplitude, amplitude]``
    samples.  For each
    delay ``tau`` a ridge readout maps ``x(t)`` to ``u(t - tau)`` on the
    first part of the run, and the held-out coefficient of determination,
    clamped to ``[0, 1]``, is recorded.  Delay 0 is reported but not summed.
    """
    if not 0 < tau_max < T / 2:
        raise ValueError("tau_max must satisfy 0 < tau_max < T / 2")
    rng = np.random.default_rng(seed)
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    u = amplitude * rng.uniform(-1.0, 1.0, size=T)
    res = build_reservoir(config, 1)
    states = res.run(u[:, None], 0).states
    start = max(washout, tau_max)
    X = expand_features(states[start:], 1, True).X
    n = len(X)
    cut = int(round(n * (1.0 - test_fraction)))
    r2 = np.empty(tau_max + 1)
    for tau in range(tau_max + 1):
        y = u[start - tau : T - tau]
        w = fit_ridge(X[:cut], y[:cut], beta)
        resid = y[cut:] - w.predict(X[cut:])[:, 0]
        sst = np.sum((y[cut:] - y[cut:].mean()) ** 2)
        r2[tau] = min(1.0, max(0.0, 1.0 - np.sum(resid**2) / sst))
    delays = np.arange(tau_max + 1)
    return MCResult(delays, r2, float(np.sum(r2[1:])))
