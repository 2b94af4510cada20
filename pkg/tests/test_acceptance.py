"""Acceptance checks.  Each test prints one PASS/FAIL line, then asserts.

Run with ``pytest tests/test_acceptance.py`` (the lines show without ``-s``).
"""

import math
import time
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from moelab.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from moelab.model import (
    ExpertId,
    ModelConfig,
    MoeModel,
    backward,
    batch_loss,
    forward,
    full_backward,
    init_model,
)
from moelab.pipeline import perturbation_sweep
from moelab.routing import RoutingProfile, collect_profile, load_profile, save_profile
from moelab.selection import (
    ProfileMatrix,
    SelectionConfig,
    allocate_budget,
    composite_ovlp,
    composite_spec,
    overlap_score,
    select_subnetwork,
    specificity,
)
from moelab.theory import disjoint_scenario, support_set, verify_exact_invariance, verify_gradient_isolation
from moelab.training import TrainConfig, build_mask, train

from conftest import random_batch
from oracles import (
    brute_force_selection,
    central_difference,
    mp_composite,
    mp_overlap,
    mp_specificity,
    routing_support_from_traces,
)

mpmath.mp.dps = 50


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, passed: bool, detail: str, started: float) -> None:
        status = "PASS" if passed else "FAIL"
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {status}  {title}: {detail} ({time.perf_counter() - started:.1f}s)")
    return emit


def rel_err(got, want) -> float:
    want = mpmath.mpf(want)
    if want == 0:
        return 0.0 if got == 0 else math.inf
    return float(abs((mpmath.mpf(float(got)) - want) / want))


# 1 --------------------------------------------------------------------------------------


def test_gradient_isolation(report, default_model):
    started = time.perf_counter()
    model = default_model
    rng = np.random.default_rng(0)
    everyone = model.config.all_experts()
    asserted = 0
    failures = []
    for b in range(100):
        batch = random_batch(rng, model.config.vocab_size, 2, 4)
        # route A: the library check
        result = verify_gradient_isolation(model, batch)
        # route B: support from a scalar re-implementation, raw gradients from backward
        support = routing_support_from_traces(model, batch)
        grads = backward(model, batch, everyone)
        outside = [e for e in everyone if tuple(e) not in support]
        nonzero = [e for e in outside if np.any(grads[e].w_in) or np.any(grads[e].w_out)]
        lib_support = {(int(l), int(i)) for l, i in zip(*np.nonzero(result.support))}
        if not result.passed or nonzero or lib_support != support or result.n_asserted != len(outside):
            failures.append(b)
        asserted += len(outside)
    passed = not failures and asserted > 0
    report(1, "gradient isolation", passed,
           f"100 batches, {asserted} out-of-support experts asserted bitwise zero, failing batches {failures}",
           started)
    assert passed


# 2 --------------------------------------------------------------------------------------


def test_exact_invariance(report):
    started = time.perf_counter()
    sc = disjoint_scenario()
    before = sc.model
    target_train, target_held = sc.target
    other_held = sc.other[1].sequences
    selected = support_set_of(before, target_train.sequences)
    cfg = TrainConfig(epochs=10_000, batch_size=16, learning_rate=0.05, optimizer="sgd", max_steps=50)
    after, history = train(before, target_train, build_mask(selected, before), cfg)
    # route A: the library check in exact mode
    result = verify_exact_invariance(before, after, other_held, selected)
    # route B: per-sequence forward passes compared byte for byte
    same = all(forward(before, s, exact=True)[0].tobytes() == forward(after, s, exact=True)[0].tobytes()
               for s in other_held)
    moved = not after.bitwise_equal(before) and any(
        forward(before, s, exact=True)[0].tobytes() != forward(after, s, exact=True)[0].tobytes()
        for s in target_held.sequences)
    passed = (len(history) == 50 and len(other_held) == 200 and result.passed and result.bitwise_equal
              and same and moved)
    report(2, "exact invariance", passed,
           f"{len(history)} steps, {len(other_held)} other-language sequences, {result.status}, "
           f"per-sequence bytes equal {same}, target logits moved {moved}", started)
    assert passed


def support_set_of(model, sequences):
    return support_set(collect_profile(model, sequences))


# 3 --------------------------------------------------------------------------------------


def test_perturbation_bound(report, benchmark):
    started = time.perf_counter()
    trials, discarded = perturbation_sweep(benchmark.base, benchmark.suite, benchmark.profiles, 100, seed=0)
    held = sum(t.holds for t in trials)
    ratios = [r.looseness for t in trials for r in t.results.values()
              if r.measured > 0 and math.isfinite(r.looseness)]
    zero_zero = sum(r.measured == 0.0 and r.bound == 0.0 for t in trials for r in t.results.values())
    passed = len(trials) == 100 and held == 100
    report(3, "perturbation bound", passed,
           f"{held}/{len(trials)} stable trials hold ({discarded} discarded for routing change); "
           f"looseness bound/measured median {np.median(ratios):.3g}, min {min(ratios):.3g}, "
           f"max {max(ratios):.3g}; {zero_zero} zero-overlap cases with bound 0", started)
    assert passed


# 4 --------------------------------------------------------------------------------------

DENOMINATORS = (4, 8, 10, 16, 20, 100)


def random_instance(rng):
    n_layers = int(rng.integers(3, 9))
    n_experts = int(rng.integers(1, 9))
    n_lang = int(rng.integers(2, 5))
    total = int(rng.integers(1, 8))
    counts = [rng.integers(0, total + 1, size=(n_layers, n_experts)) for _ in range(n_lang)]
    l1 = int(rng.integers(0, n_layers - 2))
    l2 = int(rng.integers(l1 + 1, n_layers - 1))
    den = int(rng.choice(DENOMINATORS))
    a = int(rng.integers(0, den + 1))
    b = int(rng.integers(0, den - a + 1))
    ratios = (Fraction(a, den), Fraction(b, den), Fraction(den - a - b, den))
    k = int(rng.integers(1, n_layers * n_experts + 1))
    alpha = float(rng.choice([0.0, 1.0, 10.0]))
    return counts, total, (l1, l2), ratios, k, alpha, int(rng.integers(n_lang))


def test_selection_matches_brute_force(report):
    started = time.perf_counter()
    rng = np.random.default_rng(4)
    checked = mismatches = 0
    while checked < 1000:
        counts, total, bounds, ratios, k, alpha, target = random_instance(rng)
        n_layers, n_experts = counts[0].shape
        sizes = (bounds[0] + 1, bounds[1] - bounds[0], n_layers - 1 - bounds[1])
        budgets = allocate_budget(k, [float(r) for r in ratios])
        if any(bg > s * n_experts for bg, s in zip(budgets, sizes)):
            continue
        names = [f"lang{j}" for j in range(len(counts))]
        matrix = ProfileMatrix.from_profiles([RoutingProfile(n, total, c) for n, c in zip(names, counts)])
        cfg = SelectionConfig(names[target], k, bounds, tuple(float(r) for r in ratios), alpha)
        got = {tuple(e) for e in select_subnetwork(matrix, cfg).ids}
        freqs = [[[int(x) / total for x in row] for row in c] for c in counts]
        want = brute_force_selection(freqs, target, k, bounds, ratios, alpha)
        mismatches += got != want
        checked += 1
    passed = mismatches == 0
    report(4, "selection oracle equivalence", passed,
           f"{checked} instances (L<=8, N<=8, M<=4), {mismatches} mismatches", started)
    assert passed


# 5 --------------------------------------------------------------------------------------


def test_budget_arithmetic(report):
    started = time.perf_counter()
    big = allocate_budget(128, (0.35, 0.25, 0.40))
    small = allocate_budget(16, (0.125, 0.6875, 0.1875))
    passed = big == (44, 32, 52) and small == (2, 11, 3)
    report(5, "budget arithmetic", passed, f"K=128 -> {big}, K=16 -> {small}", started)
    assert passed


# 6 --------------------------------------------------------------------------------------


def test_score_formulas(report):
    started = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10_000):
        m = int(rng.integers(2, 9))
        column = rng.uniform(0.0, 1.0, size=m)
        column[rng.random(m) < 0.1] = 0.0
        alpha = float(rng.choice([10.0, rng.uniform(0, 20)]))
        mu = sum(float(x) for x in column) / m
        a = float(column[0])
        s = specificity(a, mu)
        o = overlap_score(column)
        worst = max(worst,
                    rel_err(s, mp_specificity(a, mu)),
                    rel_err(o, mp_overlap(column)),
                    rel_err(composite_spec(s, a, alpha), mp_composite(s, a, alpha)),
                    rel_err(composite_ovlp(o, mu, alpha), mp_composite(o, mu, alpha)))
    degenerate = (specificity(0.4, 0.0) == 0.0 and overlap_score(np.zeros(3)) == 0.0
                  and composite_spec(specificity(0.0, 0.0), 0.0) == 0.0
                  and composite_ovlp(overlap_score(np.zeros(4)), 0.0) == 0.0)
    passed = worst <= 1e-12 and degenerate
    report(6, "score formulas", passed,
           f"10000 inputs, worst relative error {worst:.2e} vs 50-digit reference, degenerate cases zero {degenerate}",
           started)
    assert passed


# 7 --------------------------------------------------------------------------------------


def _relative(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale == 0 else float(np.linalg.norm(analytic - numeric) / scale)


def test_gradients_match_finite_differences(report):
    started = time.perf_counter()
    cfg = ModelConfig(vocab_size=10, d_model=6, d_expert_hidden=4, n_layers=3, n_experts=4, top_k=2,
                      max_seq_len=8, seed=5)
    model = init_model(cfg)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        batch = random_batch(rng, cfg.vocab_size, 3, 6)
        _, grads = full_backward(model, batch)
        expert_grads = backward(model, batch, cfg.all_experts())
        for name in ("embed", "router", "shared", "head", "w_in", "w_out"):
            base = np.array(getattr(model, name))

            def loss_of(arr, name=name):
                return batch_loss(model.replace(**{name: arr}), batch)

            numeric = central_difference(loss_of, base, 1e-5)
            worst = max(worst, _relative(getattr(grads, name), numeric))
            if name in ("w_in", "w_out"):
                # the expert-only path must agree as well
                stacked = np.stack([np.stack([getattr(expert_grads[ExpertId(l, i)], name)
                                              for i in range(cfg.n_experts)]) for l in range(cfg.n_layers)])
                worst = max(worst, _relative(stacked, numeric))
    passed = worst < 1e-4
    report(7, "gradient correctness", passed,
           f"20 batches, d_model 6, all parameters, worst relative error {worst:.2e}", started)
    assert passed


# 8 --------------------------------------------------------------------------------------


def test_routing_isolation_emerges(report, benchmark):
    started = time.perf_counter()
    a = benchmark.analysis
    regions = ", ".join(f"{l} shallow/middle/deep {s:.3f}/{m:.3f}/{d:.3f}" for l, (s, m, d) in a.regions.items())
    passed = a.group_separated and a.deep_below_middle
    report(8, "routing isolation", passed,
           f"(a) cross-group {a.cross:.4f} < within-group {a.within:.4f}: {a.group_separated}; "
           f"(b) deep < middle for every low-resource language vs {a.reference}: {a.deep_below_middle} "
           f"[{regions}]", started)
    assert passed


# 9 --------------------------------------------------------------------------------------


def test_selective_training_direction(report, benchmark):
    started = time.perf_counter()
    out = benchmark.outcome
    target = benchmark.cfg.target
    train_change = out.train_change
    prune_change = out.prune_change
    checked = out.non_targets()
    everyone_else = out.non_targets(include_disjoint=True)
    target_down = train_change[target] <= -0.05
    others_flat = all(abs(train_change[l]) <= 0.01 for l in checked)
    prune_mean = float(np.mean([prune_change[l] for l in everyone_else]))
    prune_hits_target = prune_change[target] > prune_mean
    passed = target_down and others_flat and prune_hits_target
    moves = ", ".join(f"{l} {train_change[l]:+.2%}" for l in checked)
    report(9, "selective training direction", passed,
           f"target {target} {train_change[target]:+.2%}; non-disjoint non-targets [{moves}]; "
           f"pruning target {prune_change[target]:+.2%} vs non-target mean {prune_mean:+.2%}", started)
    assert passed


# 10 -------------------------------------------------------------------------------------


def random_model(rng) -> MoeModel:
    cfg = ModelConfig(vocab_size=int(rng.integers(2, 20)), d_model=int(rng.integers(1, 7)),
                      d_expert_hidden=int(rng.integers(1, 5)), n_layers=int(rng.integers(3, 6)),
                      n_experts=int(rng.integers(2, 6)), top_k=1, max_seq_len=8,
                      seed=int(rng.integers(2**32)))
    model = init_model(cfg)
    pruned = rng.random((cfg.n_layers, cfg.n_experts)) < 0.3
    pruned[:, 0] = False
    # adversarial floats: signed zeros, subnormals, extremes
    embed = np.array(model.embed)
    embed.flat[0] = float(rng.choice([-0.0, 5e-324, 1.7976931348623157e308, -1e-310]))
    return model.replace(embed=embed, pruned=pruned)


def test_serialization_round_trips(report, tmp_path):
    started = time.perf_counter()
    rng = np.random.default_rng(10)
    failures = 0
    for j in range(100):
        model = random_model(rng)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        again = from_bytes(to_bytes(model))
        ok = (back.config == model.config and back.bitwise_equal(model) and again.bitwise_equal(model)
              and back.pruned.tobytes() == model.pruned.tobytes())
        counts = rng.integers(0, 50, size=(model.config.n_layers, model.config.n_experts))
        profile = RoutingProfile(f"lang{j}", 50, counts)
        save_profile(profile, tmp_path / "p.json")
        loaded = load_profile(tmp_path / "p.json")
        ok = ok and loaded == profile and loaded.counts.tobytes() == profile.counts.astype(loaded.counts.dtype).tobytes()
        failures += not ok
    passed = failures == 0
    report(10, "serialization round trips", passed, f"100 checkpoints and 100 profiles, {failures} failures",
           started)
    assert passed
