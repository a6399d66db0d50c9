"""Experiment orchestration: configs, per-seed runs, sweeps and reports.

An experiment config is a JSON document with a ``schema`` field.  Unknown
keys are rejected.  Each (config, seed) pair is an independent cell.  Cells
may run in worker processes.  Results are merged in sorted key order, so
serial and parallel runs write identical files.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .chaos import EstimationError
from .dynamics import SamplingPlan, TimeSeries, simulate, system_from_dict
from .forecast import closed_loop, open_loop, train_one_step_model
from .reservoir import config_from_dict

logger = logging.getLogger(__name__)

__all__ = [
    "EXPERIMENT_SCHEMA",
    "SWEEP_SCHEMA",
    "LYAPUNOV_TIMES",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "SweepSpec",
    "SweepResult",
    "DatasetCache",
    "preset_experiment",
    "run_experiment",
    "run_sweep",
    "write_long_csv",
    "worker_count",
]

EXPERIMENT_SCHEMA = "reservoirbench.experiment/1"
SWEEP_SCHEMA = "reservoirbench.sweep/1"

# reference Lyapunov times used to express valid times in Lyapunov units
LYAPUNOV_TIMES = {"lorenz": 1.104972, "rossler": 14.0056, "chen": 1.205148, "chua": 2.334267}

HIGHER_IS_BETTER = {"vpt", "vpt_lyapunov", "r2", "pearson"}


class ConfigError(ValueError):
    """Invalid experiment or sweep document."""


# ---------------------------------------------------------------------------
# Config documents
# ---------------------------------------------------------------------------

_EXPERIMENT_KEYS = {
    "schema",
    "name",
    "dataset",
    "reservoir",
    "beta",
    "degree",
    "include_bias",
    "readout_mode",
    "split",
    "horizons",
    "mode",
    "seeds",
    "metrics",
    "lyapunov_time",
    "vpt_epsilon",
    "adev_cells",
}
_DATASET_KEYS = {"system", "params", "dt", "n_total", "washout", "x0"}
_SPLIT_KEYS = {"train", "warmup", "test"}

DEFAULT_EXPERIMENT = {
    "schema": EXPERIMENT_SCHEMA,
    "name": "experiment",
    "beta": 1e-4,
    "degree": 1,
    "include_bias": True,
    "readout_mode": "global",
    "split": {"train": 4500, "warmup": 100, "test": 3500},
    "horizons": [10, 100, 500, 1000],
    "mode": "open",
    "seeds": [1, 2, 3, 4, 5],
    "metrics": ["nrmse"],
    "lyapunov_time": None,
    "vpt_epsilon": 0.2,
    "adev_cells": 30,
}


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    """Validated experiment document.

    ``doc`` holds the full normalised JSON form; the other attributes are
    parsed views of it.
    """

    doc: dict
    system: object = field(init=False, repr=False)
    plan: SamplingPlan = field(init=False, repr=False)
    reservoir: object = field(init=False, repr=False)

    def __post_init__(self):
        doc = self.doc
        if doc.get("schema") != EXPERIMENT_SCHEMA:
            raise ConfigError(f"schema must be {EXPERIMENT_SCHEMA!r}, got {doc.get('schema')!r}")
        _reject_unknown(doc, _EXPERIMENT_KEYS, "experiment")
        full = copy.deepcopy(DEFAULT_EXPERIMENT)
        full.update(copy.deepcopy(doc))
        if "dataset" not in full or "reservoir" not in full:
            raise ConfigError("experiment needs 'dataset' and 'reservoir'")
        ds = full["dataset"]
        _reject_unknown(ds, _DATASET_KEYS, "dataset")
        _reject_unknown(full["split"], _SPLIT_KEYS, "split")
        try:
            self.system = system_from_dict({"system": ds.get("system"), "params": ds.get("params", {})})
            self.plan = SamplingPlan(
                float(ds.get("dt", 0.02)),
                int(ds.get("n_total", 8000)),
                int(ds.get("washout", 2000)),
                tuple(ds.get("x0", (1.0, 1.0, 1.0))),
            )
            self.reservoir = config_from_dict(full["reservoir"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not full["seeds"]:
            raise ConfigError("seeds must be non-empty")
        if any(not isinstance(s, int) for s in full["seeds"]):
            raise ConfigError("seeds must be integers")
        sp = full["split"]
        if sp["train"] + sp["test"] > self.plan.n_total:
            raise ConfigError("train + test exceeds the sampled length")
        if not full["horizons"] or any(h < 1 or h > sp["test"] for h in full["horizons"]):
            raise ConfigError("horizons must lie in [1, test length]")
        if full["mode"] not in ("open", "closed", "both"):
            raise ConfigError("mode must be 'open', 'closed' or 'both'")
        unknown = set(full["metrics"]) - set(M.METRIC_REGISTRY)
        if unknown:
            raise ConfigError(f"unknown metrics: {sorted(unknown)}")
        if full["readout_mode"] not in ("global", "local"):
            raise ConfigError("readout_mode must be 'global' or 'local'")
        self.doc = full

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls(json.load(fh))

    @property
    def seeds(self) -> list:
        return list(self.doc["seeds"])

    @property
    def horizons(self) -> list:
        return sorted(set(int(h) for h in self.doc["horizons"]))

    @property
    def modes(self) -> list:
        m = self.doc["mode"]
        return ["open", "closed"] if m == "both" else [m]

    def canonical(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def dataset_key(self) -> str:
        ds = self.doc["dataset"]
        key = {
            "system": ds["system"],
            "params": ds.get("params", {}),
            "dt": self.plan.dt,
            "n_total": self.plan.n_total,
            "washout": self.plan.washout,
            "x0": list(self.plan.x0),
        }
        return json.dumps(key, sort_keys=True)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        doc = copy.deepcopy(self.doc)
        doc["seeds"] = list(seeds)
        return ExperimentConfig(doc)


def _member(n, seed=0, **kw) -> dict:
    cfg = {
        "topology": {"kind": "dense_sparse", "n": n, "connectivity": 0.05, "distribution": "uniform"},
        "spectral_radius": 0.95,
        "input_scaling": 0.2,
        "bias_scale": 0.2,
        "leak": 0.8,
        "feedback": False,
        "param_channel": None,
        "seed": seed,
        "activation": "tanh",
    }
    cfg.update(kw)
    return cfg


DATASETS = {
    "lorenz": {"system": "lorenz", "params": {}, "dt": 0.02, "n_total": 8000, "washout": 2000, "x0": [1.0, 1.0, 1.0]},
    "rossler": {"system": "rossler", "params": {}, "dt": 0.02, "n_total": 8000, "washout": 2000, "x0": [1.0, 1.0, 1.0]},
    "chen": {"system": "chen", "params": {}, "dt": 0.02, "n_total": 8000, "washout": 2000, "x0": [1.0, 1.0, 1.0]},
    "chua": {"system": "chua", "params": {}, "dt": 0.02, "n_total": 8000, "washout": 2000, "x0": [0.7, 0.0, 0.0]},
    "mackey_glass": {"system": "mackey_glass", "params": {}, "dt": 0.1, "n_total": 8000, "washout": 2000, "x0": [1.2]},
}


def preset_reservoir(variant: str, n: int = 300, input_dim: int = 3) -> dict:
    """Reservoir document for a named variant with the default hyperparameters."""
    if variant == "vanilla":
        return _member(n)
    if variant == "scr":
        return _member(n, topology={"kind": "simple_cycle", "n": n, "edge_weight": 0.8})
    if variant == "crj":
        return _member(n, topology={"kind": "cycle_jumps", "n": n, "cycle_weight": 0.8, "jump_weight": 0.8, "jump_size": 15})
    if variant == "small_world":
        return _member(n, topology={"kind": "small_world", "n": n, "degree": 6, "rewire_prob": 0.1, "weight_scale": 1.0})
    if variant == "mci":
        return _member(2 * n, topology={"kind": "mci", "n_sub": n, "cycle_weight": 0.8, "inter_weight": 0.8, "input_balance": 0.5})
    if variant == "parallel":
        members = [_member(n) for _ in range(input_dim)]
        return _member(n, topology={"kind": "parallel", "members": members, "group_size": 1, "buffer": 1})
    if variant in ("deep", "deep_ia", "grouped"):
        mode = {"deep": "stacked", "deep_ia": "input_to_all", "grouped": "grouped"}[variant]
        return _member(n, topology={"kind": "deep", "layers": [_member(n) for _ in range(3)], "mode": mode})
    raise ValueError(f"unknown variant {variant!r}")


def preset_experiment(system: str = "lorenz", variant: str = "vanilla", n: int = 300, **overrides) -> dict:
    """Experiment document for ``system`` with a named reservoir variant."""
    if system not in DATASETS:
        raise ValueError(f"no dataset preset for {system!r}")
    ds = copy.deepcopy(DATASETS[system])
    dim = len(ds["x0"])
    doc = copy.deepcopy(DEFAULT_EXPERIMENT)
    doc.update({"name": f"{system}-{variant}", "dataset": ds, "reservoir": preset_reservoir(variant, n, dim)})
    doc.update(overrides)
    return doc


# ---------------------------------------------------------------------------
# Dataset cache
# ---------------------------------------------------------------------------


class DatasetCache:
    """Simulated datasets keyed by their system and sampling plan.

    ``simulations`` counts actual integrator calls.
    """

    def __init__(self):
        self._store = {}
        self.simulations = 0

    def get(self, config: ExperimentConfig) -> TimeSeries:
        key = config.dataset_key()
        if key not in self._store:
            self._store[key] = simulate(config.system, config.plan)
            self.simulations += 1
        return self._store[key]


# ---------------------------------------------------------------------------
# Per-seed evaluation
# ---------------------------------------------------------------------------


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _horizon_metrics(name, truth, pred, dt, ctx) -> dict:
    """Value of one registry metric on aligned windows; NaN when undefined."""
    if name == "nrmse":
        return M.nrmse(truth, pred)
    if name in ("vpt", "vpt_lyapunov"):
        t, tl = M.vpt(truth, pred, ctx["vpt_epsilon"], dt, ctx["lyapunov_time"], scale=ctx["test_std"])
        if name == "vpt":
            return t
        return float("nan") if tl is None else tl
    if name == "adev":
        return float(M.adev(truth, pred, ctx["adev_cells"]))
    if name == "psd_distance":
        seg = min(1024, len(truth))
        if seg < 16:
            return float("nan")
        return M.psd_distance(M.psd_welch(truth[:, 0], seg, 0.5, dt), M.psd_welch(pred[:, 0], seg, 0.5, dt))
    if name == "lyapunov_deviation":
        if len(truth) < 200:
            return float("nan")
        try:
            return M.lyapunov_deviation(truth, pred, dt)[2]
        except EstimationError:
            return float("nan")
    if name in ("mae", "mape", "r2", "pearson"):
        return M.basic_errors(truth, pred)[name]
    if name == "dtw":
        return M.dtw_distance(truth[:, 0], pred[:, 0])
    if name == "kl":
        return M.kl_divergence(truth, pred)
    raise KeyError(name)


def _run_cell(doc: dict, seed: int, data: np.ndarray, dt: float) -> dict:
    """Train and evaluate one seed; errors are captured, not raised."""
    import warnings

    cfg = ExperimentConfig(doc)
    d = cfg.doc
    sp = d["split"]
    train, warmup, test = sp["train"], sp["warmup"], sp["test"]
    out = {"seed": seed, "rows": [], "error": None, "divergence": {}}
    try:
        reservoir = cfg.reservoir.reseeded(seed)
        model = train_one_step_model(
            data, reservoir, d["beta"], (train, warmup, test), d["degree"], d["include_bias"], d["readout_mode"]
        )
        tr, te = data[:train], data[train : train + test]
        lyap_time = d["lyapunov_time"]
        if lyap_time is None:
            lyap_time = LYAPUNOV_TIMES.get(d["dataset"]["system"])
        ctx = {
            "vpt_epsilon": d["vpt_epsilon"],
            "lyapunov_time": lyap_time,
            "adev_cells": d["adev_cells"],
            "test_std": te.std(axis=0),
        }
        H = max(cfg.horizons)
        preds = {}
        if "open" in cfg.modes:
            drive = np.vstack([tr[-1:], te[: H - 1]])
            preds["open"] = open_loop(model, drive, priming=tr[:-1]).predictions
        if "closed" in cfg.modes:
            res = closed_loop(model, tr[-(warmup + 100) :], H)
            preds["closed"] = res.predictions
            if res.divergence_step is not None:
                out["divergence"]["closed"] = int(res.divergence_step)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for mode in sorted(preds):
                for h in cfg.horizons:
                    for name in sorted(d["metrics"]):
                        try:
                            value = _horizon_metrics(name, te[:h], preds[mode][:h], dt, ctx)
                        except (ValueError, ZeroDivisionError) as exc:
                            logger.info("metric %s failed: %s", name, exc)
                            value = float("nan")
                        out["rows"].append({"mode": mode, "horizon": h, "metric": name, "value": _json_float(value)})
    except Exception as exc:  # recorded per seed, the remaining seeds still run
        out["error"] = f"{type(exc).__name__}: {exc}"
        logger.warning("seed %s failed: %s", seed, out["error"])
    return out


def _aggregate(per_seed: list) -> list:
    groups = {}
    for entry in per_seed:
        for row in entry["rows"]:
            key = (row["mode"], row["horizon"], row["metric"])
            groups.setdefault(key, []).append(row["value"])
    agg = []
    for key in sorted(groups):
        vals = np.array([v for v in groups[key] if v is not None], dtype=float)
        if vals.size:
            mean, std = float(np.mean(vals)), float(np.std(vals))
        else:
            mean = std = None
        agg.append({"mode": key[0], "horizon": key[1], "metric": key[2], "mean": mean, "std": std, "n": int(vals.size)})
    return agg


def worker_count(requested: int | None = None) -> int:
    """Workers to use, capped by ``RESERVOIRBENCH_THREADS`` when set."""
    n = requested if requested is not None else os.cpu_count() or 1
    cap = os.environ.get("RESERVOIRBENCH_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError("RESERVOIRBENCH_THREADS must be an integer") from None
    return max(1, int(n))


def _map_cells(cells, workers: int) -> list:
    """Evaluate ``(doc, seed, data, dt)`` cells; results come back in input order."""
    if workers <= 1 or len(cells) <= 1:
        return [_run_cell(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        return list(pool.map(_run_cell, *zip(*cells)))


@dataclass
class ExperimentReport:
    """Per-seed rows plus mean and population std per (mode, horizon, metric).

    ``payload`` is the deterministic part; ``meta`` holds timestamps.
    """

    payload: dict
    meta: dict = field(default_factory=dict)

    def payload_bytes(self) -> bytes:
        return json.dumps(self.payload, sort_keys=True, separators=(",", ":")).encode()

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"payload": self.payload, "meta": self.meta}, fh, sort_keys=True, indent=1)

    def aggregate(self, mode: str, horizon: int, metric: str) -> dict:
        for row in self.payload["aggregate"]:
            if (row["mode"], row["horizon"], row["metric"]) == (mode, horizon, metric):
                return row
        raise KeyError((mode, horizon, metric))

    def values(self, mode: str, horizon: int, metric: str) -> list:
        out = []
        for entry in self.payload["per_seed"]:
            for row in entry["rows"]:
                if (row["mode"], row["horizon"], row["metric"]) == (mode, horizon, metric):
                    out.append(row["value"])
        return out


def _report(cfg: ExperimentConfig, per_seed: list, started: float) -> ExperimentReport:
    per_seed = sorted(per_seed, key=lambda e: e["seed"])
    payload = {
        "schema": "reservoirbench.report/1",
        "config": cfg.doc,
        "config_fingerprint": cfg.fingerprint(),
        "per_seed": per_seed,
        "aggregate": _aggregate(per_seed),
    }
    meta = {"created": time.strftime("%Y-%m-%dT%H:%M:%S"), "elapsed_s": round(time.time() - started, 3)}
    return ExperimentReport(payload, meta)


def run_experiment(config, cache: DatasetCache | None = None, workers: int | None = 1) -> ExperimentReport:
    """Simulate, train, forecast and score every seed of ``config``."""
    started = time.time()
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig(config)
    cache = cache or DatasetCache()
    ts = cache.get(cfg)
    cells = [(cfg.doc, s, ts.data, ts.dt) for s in cfg.seeds]
    per_seed = _map_cells(cells, worker_count(workers))
    return _report(cfg, per_seed, started)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _set_path(doc: dict, path: str, value) -> None:
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        if isinstance(node, list):
            k = int(k)
        elif k not in node:
            raise ConfigError(f"parameter path {path!r} does not resolve")
        node = node[k]
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        if last not in node:
            raise ConfigError(f"parameter path {path!r} does not resolve")
        node[last] = value


@dataclass
class SweepSpec:
    """Base experiment, axes and expansion strategy.

    Each axis is ``{"path": "a.b.c", "values": [...]}`` or
    ``{"path": ..., "uniform": [lo, hi]}`` (random strategy only).  The
    strategy is ``"grid"`` or ``{"random": n}``.
    """

    base: dict
    axes: list
    strategy: object = "grid"
    master_seed: int = 0
    cap: int = 1000

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepSpec":
        if doc.get("schema") != SWEEP_SCHEMA:
            raise ConfigError(f"schema must be {SWEEP_SCHEMA!r}")
        _reject_unknown(doc, {"schema", "base", "axes", "strategy", "master_seed", "cap"}, "sweep")
        for ax in doc.get("axes", []):
            _reject_unknown(ax, {"path", "values", "uniform", "links"}, "axis")
        return cls(doc["base"], doc.get("axes", []), doc.get("strategy", "grid"), int(doc.get("master_seed", 0)), int(doc.get("cap", 1000)))

    def _apply(self, values: dict) -> dict:
        doc = copy.deepcopy(self.base)
        for ax in self.axes:
            v = values[ax["path"]]
            _set_path(doc, ax["path"], v)
            # linked paths receive the same value, e.g. ring size and n
            for link in ax.get("links", []):
                _set_path(doc, link, v)
        return doc

    def expand(self) -> list:
        """Concrete experiment documents with the axis values that made them."""
        if self.strategy == "grid":
            for ax in self.axes:
                if "values" not in ax:
                    raise ConfigError("grid strategy needs explicit values on every axis")
            combos = list(itertools.product(*[ax["values"] for ax in self.axes])) if self.axes else [()]
            points = [dict(zip([ax["path"] for ax in self.axes], c)) for c in combos]
        elif isinstance(self.strategy, dict) and set(self.strategy) == {"random"}:
            n = int(self.strategy["random"])
            rng = np.random.default_rng(self.master_seed)
            points = []
            for _ in range(n):
                p = {}
                for ax in self.axes:
                    if "uniform" in ax:
                        lo, hi = ax["uniform"]
                        p[ax["path"]] = float(rng.uniform(lo, hi))
                    else:
                        vals = ax["values"]
                        p[ax["path"]] = vals[int(rng.integers(len(vals)))]
                points.append(p)
        else:
            raise ConfigError("strategy must be 'grid' or {'random': n}")
        if len(points) > self.cap:
            raise ConfigError(f"sweep expands to {len(points)} points, above the cap {self.cap}")
        out = []
        for p in points:
            doc = self._apply(p)
            ExperimentConfig(doc)
            out.append((p, doc))
        return out


@dataclass
class SweepResult:
    """Reports per sweep point, long-format rows, marginals and best points."""

    points: list
    reports: list
    rows: list
    marginals: dict
    best: dict


def _long_rows(config_id: str, report: ExperimentReport) -> list:
    rows = []
    for entry in report.payload["per_seed"]:
        for r in entry["rows"]:
            rows.append((config_id, entry["seed"], r["horizon"], f"{r['mode']}.{r['metric']}", r["value"]))
    return rows


def run_sweep(sweep, parallelism: int | None = None, cache: DatasetCache | None = None) -> SweepResult:
    """Evaluate every sweep point over its seeds with a shared dataset cache."""
    started = time.time()
    spec = sweep if isinstance(sweep, SweepSpec) else SweepSpec.from_dict(sweep)
    cache = cache or DatasetCache()
    expanded = spec.expand()
    configs = [ExperimentConfig(doc) for _, doc in expanded]
    cells, owners = [], []
    for i, cfg in enumerate(configs):
        ts = cache.get(cfg)
        for s in cfg.seeds:
            cells.append((cfg.doc, s, ts.data, ts.dt))
            owners.append(i)
    results = _map_cells(cells, worker_count(parallelism))
    reports = []
    for i, cfg in enumerate(configs):
        mine = [r for r, o in zip(results, owners) if o == i]
        reports.append(_report(cfg, mine, started))
    rows = []
    for i, rep in enumerate(reports):
        rows.extend(_long_rows(f"c{i:04d}", rep))
    marginals = {}
    for ax in spec.axes:
        path = ax["path"]
        table = {}
        for (point, _), rep in zip(expanded, reports):
            for agg in rep.payload["aggregate"]:
                key = (json.dumps(point[path]), agg["mode"], agg["horizon"], agg["metric"])
                vals = [v for v in rep.values(agg["mode"], agg["horizon"], agg["metric"]) if v is not None]
                table.setdefault(key, []).extend(vals)
        marginals[path] = [
            {"value": json.loads(k[0]), "mode": k[1], "horizon": k[2], "metric": k[3], "mean": float(np.mean(v)) if v else None, "n": len(v)}
            for k, v in sorted(table.items())
        ]
    best = {}
    for i, rep in enumerate(reports):
        for agg in rep.payload["aggregate"]:
            if agg["mean"] is None:
                continue
            key = f"{agg['mode']}.{agg['metric']}@{agg['horizon']}"
            better = (lambda a, b: a > b) if agg["metric"] in HIGHER_IS_BETTER else (lambda a, b: a < b)
            if key not in best or better(agg["mean"], best[key]["mean"]):
                best[key] = {"config_id": f"c{i:04d}", "mean": agg["mean"], "point": expanded[i][0]}
    return SweepResult([p for p, _ in expanded], reports, rows, marginals, best)


def write_long_csv(rows, path) -> None:
    """Write ``config_id,seed,horizon,metric,value`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "seed", "horizon", "metric", "value"])
        for cid, seed, h, metric, value in rows:
            w.writerow([cid, seed, h, metric, "" if value is None else repr(value)])
