"""Masked updates on the default base model checked against the perturbation
certificate; prints per-trial tightness and a summary.

    python3 scripts/perturbation_sweep.py --trials 100 --seed 0
"""

import argparse
import math

import numpy as np

from moelab.pipeline import BenchmarkConfig, build_suite, collect_profiles, perturbation_sweep, pretrain_base


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--trials", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--verbose", action="store_true", help="one line per trial and language")
    args = parser.parse_args()

    cfg = BenchmarkConfig()
    suite = build_suite(cfg.suite, cfg.model.vocab_size)
    base, _ = pretrain_base(cfg, suite)
    profiles = collect_profiles(base, suite.train)
    trials, discarded = perturbation_sweep(base, suite, profiles, args.trials, seed=args.seed)

    looseness = []
    for n, trial in enumerate(trials):
        for label, r in trial.results.items():
            if r.measured > 0 and math.isfinite(r.looseness):
                looseness.append(r.looseness)
            if args.verbose:
                print(f"trial {n:3d} target {trial.target} K={trial.budget:2d} steps={trial.steps} "
                      f"lr={trial.learning_rate:.2e} {label}: measured {r.measured:.3e} bound {r.bound:.3e} "
                      f"mass {r.overlap_mass:.3f} {'ok' if r.holds else 'VIOLATED'}")
    held = sum(t.holds for t in trials)
    print(f"{held}/{len(trials)} stable trials within the bound, {discarded} attempts discarded")
    if looseness:
        q = np.quantile(looseness, [0.0, 0.5, 1.0])
        print(f"bound / measured: min {q[0]:.3g}  median {q[1]:.3g}  max {q[2]:.3g}")


if __name__ == "__main__":
    main()
