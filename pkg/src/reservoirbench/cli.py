"""Command-line entry point.

Exit codes: 0 on success, 1 for invalid arguments or configs, 2 for runtime
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import bench
from .chaos import EstimationError, lyapunov_rosenstein, lyapunov_rosenstein_auto
from .dynamics import IntegrationError, SamplingPlan, TimeSeries, simulate, system_from_dict
from .forecast import TrainedModel, closed_loop, memory_capacity, open_loop, train_one_step_model
from .reservoir import config_from_dict

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEFAULT_X0 = {"chua": [0.7, 0.0, 0.0], "mackey_glass": [1.2], "logistic": [0.4]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise bench.ConfigError(f"cannot read {path}: {exc}") from None


def cmd_simulate(args):
    params = json.loads(args.params) if args.params else {}
    spec = system_from_dict({"system": args.system, "params": params})
    x0 = args.x0 or DEFAULT_X0.get(args.system, [1.0, 1.0, 1.0])
    if args.steps <= args.washout:
        raise bench.ConfigError("--steps must exceed --washout")
    plan = SamplingPlan(args.dt, args.steps - args.washout, args.washout, tuple(x0))
    ts = simulate(spec, plan)
    if args.format == "json":
        ts.to_json(args.out)
    else:
        ts.to_csv(args.out)
    return EXIT_OK


def _experiment(args):
    cfg = bench.ExperimentConfig(_load_json(args.config))
    if getattr(args, "seeds", None):
        cfg = cfg.with_seeds(list(range(1, args.seeds + 1)))
    return cfg


def cmd_train(args):
    cfg = _experiment(args)
    d = cfg.doc
    sp = d["split"]
    data = simulate(cfg.system, cfg.plan)
    model = train_one_step_model(
        data, cfg.reservoir.reseeded(args.seed), d["beta"], (sp["train"], sp["warmup"], sp["test"]), d["degree"], d["include_bias"], d["readout_mode"]
    )
    doc = {"schema": "reservoirbench.model/1", "experiment": d, "seed": args.seed, "model": model.to_dict()}
    with open(args.out, "w") as fh:
        json.dump(doc, fh)
    return EXIT_OK


def cmd_forecast(args):
    doc = _load_json(args.model)
    if doc.get("schema") != "reservoirbench.model/1":
        raise bench.ConfigError("not a model file")
    cfg = bench.ExperimentConfig(doc["experiment"])
    model = TrainedModel.from_dict(doc["model"])
    sp = cfg.doc["split"]
    data = simulate(cfg.system, cfg.plan).data
    tr, te = data[: sp["train"]], data[sp["train"] : sp["train"] + sp["test"]]
    if not 1 <= args.horizon <= len(te):
        raise bench.ConfigError(f"--horizon must lie in [1, {len(te)}]")
    if args.mode == "open":
        res = open_loop(model, np.vstack([tr[-1:], te[: args.horizon - 1]]), te[: args.horizon], priming=tr[:-1])
    else:
        res = closed_loop(model, tr[-(model.warmup + 100) :], args.horizon, te)
    res.to_csv(args.out)
    return EXIT_OK


def cmd_bench(args):
    cfg = _experiment(args)
    report = bench.run_experiment(cfg, workers=args.workers)
    report.to_json(args.out)
    failed = [e["seed"] for e in report.payload["per_seed"] if e["error"]]
    if failed:
        print(f"seeds failed: {failed}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args):
    spec = bench.SweepSpec.from_dict(_load_json(args.config))
    result = bench.run_sweep(spec, parallelism=args.workers)
    bench.write_long_csv(result.rows, args.out)
    if args.summary:
        with open(args.summary, "w") as fh:
            json.dump({"best": result.best, "marginals": result.marginals}, fh, sort_keys=True, indent=1)
    return EXIT_OK


def cmd_lyapunov(args):
    ts = TimeSeries.from_csv(args.input)
    col = ts.data[:, args.column]
    if args.auto:
        est = lyapunov_rosenstein_auto(col, ts.dt, m=args.m)
    else:
        fit = tuple(args.fit) if args.fit else None
        est = lyapunov_rosenstein(col, args.m, args.tau, ts.dt, args.k_max, args.theiler, fit)
    json.dump(est.to_dict(), sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_mc(args):
    cfg = config_from_dict(_load_json(args.config))
    res = memory_capacity(cfg, args.beta, args.tau_max, args.length, args.seed)
    if args.out:
        res.to_csv(args.out)
    else:
        sys.stdout.write("tau,r2\n")
        for tau, r in zip(res.delays[1:], res.r2[1:]):
            sys.stdout.write(f"{int(tau)},{float(r)!r}\n")
    print(f"MC={res.total:.6f}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reservoirbench", description="Reservoir computing benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a dynamical system to CSV")
    s.add_argument("--system", required=True)
    s.add_argument("--dt", type=float, default=0.02)
    s.add_argument("--steps", type=int, default=10000, help="total steps including washout")
    s.add_argument("--washout", type=int, default=2000)
    s.add_argument("--x0", type=float, nargs="+")
    s.add_argument("--params", help="JSON object of system parameters")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a one-step model from an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("forecast", help="open- or closed-loop forecast from a model file")
    s.add_argument("--model", required=True)
    s.add_argument("--mode", choices=["open", "closed"], default="closed")
    s.add_argument("--horizon", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("bench", help="run an experiment config over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", type=int, help="use seeds 1..N")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="run a sweep config to a long-format CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int)
    s.add_argument("--summary", help="optional JSON with marginals and best points")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("lyapunov", help="largest Lyapunov exponent of a CSV series")
    s.add_argument("--input", required=True)
    s.add_argument("--column", type=int, default=0)
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--tau", type=int, default=5)
    s.add_argument("--k-max", type=int, default=100)
    s.add_argument("--theiler", type=int)
    s.add_argument("--fit", type=int, nargs=2)
    s.add_argument("--auto", action="store_true", help="data-driven lag, window and fit range")
    s.set_defaults(func=cmd_lyapunov)

    s = sub.add_parser("mc", help="memory capacity curve of a reservoir config")
    s.add_argument("--config", required=True)
    s.add_argument("--tau-max", type=int, default=40)
    s.add_argument("--length", type=int, default=4000)
    s.add_argument("--beta", type=float, default=1e-8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_mc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (bench.ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IntegrationError, EstimationError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
