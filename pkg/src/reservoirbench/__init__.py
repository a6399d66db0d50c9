"""Reservoir computing benchmark harness.

Submodules
----------
dynamics
    Chaotic and reference systems, fixed-step integration, delay embedding.
chaos
    Lyapunov estimators, finite-time exponent fields, entropy diagnostics.
reservoir
    Reservoir topologies, weight construction, state updates, echo-state checks.
readout
    Linear readouts: ridge, pseudoinverse, recursive least squares, pruning.
forecast
    One-step training, open- and closed-loop prediction, memory capacity.
metrics
    Forecast error measures.
bench
    Experiment configs, multi-seed runs and parameter sweeps.
"""

from . import bench, chaos, dynamics, forecast, metrics, readout, reservoir
from .bench import ExperimentConfig, SweepSpec, preset_experiment, run_experiment, run_sweep
from .dynamics import SamplingPlan, TimeSeries, simulate
from .forecast import closed_loop, memory_capacity, open_loop, train_one_step_model
from .reservoir import ReservoirConfig, build_reservoir

__version__ = "0.1.0"

__all__ = [
    "bench",
    "chaos",
    "dynamics",
    "forecast",
    "metrics",
    "readout",
    "reservoir",
    "ExperimentConfig",
    "SweepSpec",
    "preset_experiment",
    "run_experiment",
    "run_sweep",
    "SamplingPlan",
    "TimeSeries",
    "simulate",
    "closed_loop",
    "memory_capacity",
    "open_loop",
    "train_one_step_model",
    "ReservoirConfig",
    "build_reservoir",
]
