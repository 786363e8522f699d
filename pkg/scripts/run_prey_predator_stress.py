#!/usr/bin/env python3
"""Prey-predator stress batch: near-deterministic 2-d dynamics with tiny
noise; reports how each run ended (clean or structured divergence)."""
from __future__ import annotations

import argparse
from pathlib import Path

from momentfilter.bench import load_config, run_experiment

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "prey_predator_stress.yaml"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/prey_predator_stress")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    config = load_config(CONFIG, seed=args.seed, out_dir=args.out)
    summary = run_experiment(config, threads=args.threads)

    print(f"{config.runs} runs x {config.steps} steps, dt={config.dt}")
    print(f"simulation failures: {summary['simulation_failures']}")
    for label, agg in summary["estimators"].items():
        print(f"{label}: {agg['completed_runs']} clean runs, "
              f"{agg['divergences']} diverged")
        for reason, count in agg["divergence_reasons"].items():
            print(f"  {count} x {reason}")
        if agg["error"]:
            print(f"  median state error (clean runs): {agg['error']['median']:.3e}")
    print(f"results in {args.out}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
