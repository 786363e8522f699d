"""Command-line front end: seeded experiment configs in, CSV/JSON artifacts out.

Subcommands
-----------
quad      moments JSON -> quadrature rules CSV
simulate  draw the seeded latent/measurement records of a config
filter    run the configured estimators on record 0, write its step CSV
bench     full Monte Carlo batch with summary aggregation
estimate  seeded parameter-estimation study

All subcommands share --config/--seed/--out/--threads.  Exit code 0 on
success, 2 on any configuration problem (bad file, bad keys, bad values).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from momentfilter.bench import (
    _rng_for,
    estimate_parameters,
    load_config,
    run_csv_text,
    run_experiment,
    run_single,
)
from momentfilter.errors import ConfigError, NumericalDivergence
from momentfilter.models import make_model, simulate
from momentfilter.momentspace import MomentSet
from momentfilter.quadrature import moment_quadrature

QUAD_CSV_SCHEMA = "quad-csv v1"
SIM_CSV_SCHEMA = "sim-csv v1"


def _emit(out_dir: str | None, filename: str, text: str) -> None:
    """Write `text` to out_dir/filename, or to stdout when no directory."""
    if out_dir is None:
        sys.stdout.write(text)
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / filename).write_text(text)
    print(f"wrote {out / filename}")


def _load_moment_sets(path: str) -> list[dict]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    sets = data if isinstance(data, list) else [data]
    if not sets:
        raise ConfigError("no moment sets in input")
    for i, entry in enumerate(sets):
        if not isinstance(entry, dict):
            raise ConfigError(f"moment set {i} is not an object")
        missing = {"d", "order", "values"} - entry.keys()
        if missing:
            raise ConfigError(f"moment set {i} lacks {sorted(missing)}")
    return sets


def _cmd_quad(args) -> int:
    sets = _load_moment_sets(args.config)
    d = int(sets[0]["d"])
    if any(int(entry["d"]) != d for entry in sets):
        raise ConfigError("all moment sets in one file must share d")
    lines = [f"# {QUAD_CSV_SCHEMA}"]
    lines.append(",".join(["set", "node", "weight"] + [f"x_{i+1}" for i in range(d)]))
    for si, entry in enumerate(sets):
        try:
            M = MomentSet.from_values(
                d,
                int(entry["order"]),
                entry["values"],
                center=entry.get("center", 0.0),
                scale=entry.get("scale", 1.0),
            )
            rule = moment_quadrature(M)
        except (ValueError, NumericalDivergence) as exc:
            raise ConfigError(f"moment set {si}: {exc}") from exc
        for qi in range(rule.weights.shape[0]):
            cells = [str(si), str(qi), repr(float(rule.weights[qi]))]
            cells += [repr(float(x)) for x in rule.nodes[qi]]
            lines.append(",".join(cells))
    _emit(args.out, "rules.csv", "\n".join(lines) + "\n")
    return 0


def _cmd_simulate(args) -> int:
    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    if config.out_dir is None:
        raise ConfigError(
            "simulate needs an output directory (--out or output.directory)"
        )
    model = make_model(config.model, **dict(config.model_params))
    times = config.times()
    d = model.sde.d
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ",".join(["k", "t"] + [f"x_{i+1}" for i in range(d)] + ["y"])
    failures = 0
    for r in range(config.runs):
        try:
            states, ys = simulate(
                model, times, _rng_for(config, r, 0), substeps=config.sim_substeps
            )
        except NumericalDivergence as exc:
            print(f"run {r}: simulation failed ({exc.reason})", file=sys.stderr)
            failures += 1
            continue
        lines = [f"# {SIM_CSV_SCHEMA}", header]
        for k in range(times.shape[0]):
            cells = [str(k + 1), repr(float(times[k]))]
            cells += [repr(float(x)) for x in states[k]]
            cells.append(repr(float(ys[k])))
            lines.append(",".join(cells))
        (out / f"sim_run_{r:04d}.csv").write_text("\n".join(lines) + "\n")
    sidecar = {
        "model": config.model,
        "params": dict(model.params),  # resolved, including defaulted values
        "base_seed": config.base_seed,
        "t0": config.t0,
        "dt": config.dt,
        "steps": config.steps,
        "substeps": config.sim_substeps,
        "runs": config.runs,
        "simulation_failures": failures,
    }
    (out / "simulations.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {config.runs - failures} record(s) to {out}")
    return 0


def _cmd_filter(args) -> int:
    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    if not config.estimators:
        raise ConfigError("config has no estimators")
    result = run_single(config, 0)
    if result.simulation_error is not None:
        print(f"simulation failed: {result.simulation_error}", file=sys.stderr)
        return 1
    d = make_model(config.model, **dict(config.model_params)).sde.d
    _emit(config.out_dir, "run_0000.csv", run_csv_text(result, config.times(), d))
    for er in result.estimator_runs:
        status = (
            f"diverged at step {er.diverged_at} ({er.reason})"
            if er.diverged_at is not None
            else f"nll={er.nll:.6f}"
        )
        print(f"{er.label}: {status}  [{er.wall_clock:.3f}s]", file=sys.stderr)
    return 0


def _cmd_bench(args) -> int:
    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    summary = run_experiment(config, threads=args.threads)
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_estimate(args) -> int:
    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    summary = estimate_parameters(config, threads=args.threads)
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", required=True, help="config file path")
    shared.add_argument("--seed", type=int, default=None, help="override the base seed")
    shared.add_argument("--out", default=None, help="output directory")
    shared.add_argument(
        "--threads", type=int, default=1, help="worker processes for MC runs"
    )
    parser = argparse.ArgumentParser(
        prog="momentfilter",
        description="moment-quadrature filtering experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("quad", parents=[shared], help="moments JSON -> rules CSV")
    sub.add_parser("simulate", parents=[shared], help="write seeded sample paths")
    sub.add_parser("filter", parents=[shared], help="single-record filter run")
    sub.add_parser("bench", parents=[shared], help="full Monte Carlo benchmark")
    sub.add_parser("estimate", parents=[shared], help="parameter-estimation study")
    return parser


_COMMANDS = {
    "quad": _cmd_quad,
    "simulate": _cmd_simulate,
    "filter": _cmd_filter,
    "bench": _cmd_bench,
    "estimate": _cmd_estimate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
