"""Sweep suite seeds and overlap fractions; report which directional checks hold.

Columns: cross<within (global overlap), deep<middle for every low-resource
language, and the selective-training direction (target down >= 5%, non-disjoint others
within 1%, pruning hurts the target most).

    python3 scripts/seed_sweep.py --seeds 6 --overlaps 0,0.05,0.1
"""

import argparse

import numpy as np

from moelab.pipeline import (
    BenchmarkConfig,
    SuiteConfig,
    build_suite,
    collect_profiles,
    isolation_analysis,
    pretrain_base,
    run_selective_training,
)


def direction_holds(outcome, target: str) -> bool:
    change, pruned = outcome.train_change, outcome.prune_change
    others = outcome.non_targets(include_disjoint=True)
    return (change[target] <= -0.05
            and all(abs(change[l]) <= 0.01 for l in outcome.non_targets())
            and pruned[target] > np.mean([pruned[l] for l in others]))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, default=6)
    parser.add_argument("--overlaps", default="0,0.05,0.1")
    args = parser.parse_args()

    print("overlap,seed,cross_below_within,deep_below_middle,selective_training_direction,target_change,worst_other_change")
    for overlap in (float(x) for x in args.overlaps.split(",")):
        for seed in range(args.seeds):
            cfg = BenchmarkConfig(suite=SuiteConfig(overlap_fraction=overlap, seed=seed))
            suite = build_suite(cfg.suite, cfg.model.vocab_size)
            base, _ = pretrain_base(cfg, suite)
            profiles = collect_profiles(base, suite.train)
            analysis = isolation_analysis(profiles, suite.groups())
            outcome = run_selective_training(cfg, base, suite, profiles)
            worst = max((abs(outcome.train_change[l]) for l in outcome.non_targets()), default=0.0)
            print(f"{overlap},{seed},{analysis.group_separated},{analysis.deep_below_middle},"
                  f"{direction_holds(outcome, cfg.target)},{outcome.train_change[cfg.target]:.4f},{worst:.4f}",
                  flush=True)


if __name__ == "__main__":
    main()
