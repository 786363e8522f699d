#!/usr/bin/env python3
"""OU convergence study: moment-filter error vs order against the exact
Kalman reference.  Prints the error-vs-order table and the NLL gap."""
from __future__ import annotations

import argparse
from pathlib import Path

from momentfilter.bench import load_config, run_experiment

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ou_convergence.yaml"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/ou_convergence")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    config = load_config(CONFIG, seed=args.seed, out_dir=args.out)
    summary = run_experiment(config, threads=args.threads)

    kalman_nll = summary["estimators"]["kalman"]["nll"]["median"]
    print(f"{config.runs} runs x {config.steps} steps, dt={config.dt}")
    print(f"{'estimator':<12} {'median error':>14} {'median nll':>12} {'div':>4}")
    for label, agg in summary["estimators"].items():
        err = agg["error"]["median"] if agg["error"] else float("nan")
        nll = agg["nll"]["median"] if agg["nll"] else float("nan")
        print(f"{label:<12} {err:>14.3e} {nll:>12.4f} {agg['divergences']:>4}")
    print(f"kalman median nll: {kalman_nll:.4f}")
    print(f"results in {args.out}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
