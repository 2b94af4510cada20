"""Run the default desk-scale benchmark once and print its headline numbers.

    python3 scripts/run_pipeline.py [--seed 0] [--overlap 0.0] [--target lr0]
"""

import argparse
import time

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


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seed", type=int, default=0, help="suite seed")
    parser.add_argument("--overlap", type=float, default=0.0)
    parser.add_argument("--target", default="lr0")
    args = parser.parse_args()

    started = time.perf_counter()
    cfg = BenchmarkConfig(suite=SuiteConfig(overlap_fraction=args.overlap, seed=args.seed), target=args.target)
    suite = build_suite(cfg.suite, cfg.model.vocab_size)
    base, history = pretrain_base(cfg, suite)
    profiles = collect_profiles(base, suite.train)
    analysis = isolation_analysis(profiles, suite.groups())
    outcome = run_selective_training(cfg, base, suite, profiles)

    print(f"pre-training: {len(history)} steps, last batch loss {history[-1]:.4f}")
    print(f"global top-30 overlap: within-group {analysis.within:.4f}, cross-group {analysis.cross:.4f}")
    for label, (s, m, d) in analysis.regions.items():
        print(f"  {label} vs {analysis.reference}: shallow {s:.3f} middle {m:.3f} deep {d:.3f}")
    print(f"selection budgets {outcome.selection.budgets}")
    print(f"{'language':<10}{'base':>10}{'trained':>10}{'change':>10}{'pruned':>10}{'overlap mass':>14}")
    for label in suite.labels:
        print(f"{label:<10}{outcome.base_loss[label]:>10.4f}{outcome.trained_loss[label]:>10.4f}"
              f"{outcome.train_change[label]:>+10.2%}{outcome.prune_change[label]:>+10.2%}"
              f"{outcome.overlap_mass[label]:>14.3f}")
    others = outcome.non_targets(include_disjoint=True)
    print(f"pruning: target {outcome.prune_change[cfg.target]:+.2%}, "
          f"non-target mean {np.mean([outcome.prune_change[l] for l in others]):+.2%}")
    print(f"done in {time.perf_counter() - started:.1f}s")


if __name__ == "__main__":
    main()
