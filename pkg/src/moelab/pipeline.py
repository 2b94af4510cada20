"""End-to-end desk-scale benchmark: suite, base model, isolation analysis, selective training and pruning.

The defaults model the setting the method targets: high-resource languages
see ten times the data of low-resource ones during one pass of base
pre-training, so the base model is close to the entropy floor on the former
and clearly under-trained on the latter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .model import ModelConfig, MoeModel, batch_loss, init_model, prune_experts
from .routing import (
    RoutingProfile,
    collect_profile,
    default_boundaries,
    group_means,
    layerwise_similarity,
    overlap_matrix,
    region_average,
)
from .selection import (
    ProfileMatrix,
    Selection,
    SelectionConfig,
    proportional_ratios,
    select_subnetwork,
)
from .synth import generate, is_high_resource, make_benchmark_suite
from .theory import (
    estimate_lipschitz,
    hidden_samples,
    max_input_change,
    overlap_mass,
    perturbation_check,
)
from .training import TrainConfig, build_mask, pretrain, train

GLOBAL_TOPK = 30


@dataclass(frozen=True)
class SuiteConfig:
    n_high: int = 2
    n_low: int = 2
    overlap_fraction: float = 0.0
    low_budget: int = 4096
    seq_len: int = 32
    ngram_order: int = 2
    seed: int = 0


@dataclass(frozen=True)
class BenchmarkConfig:
    suite: SuiteConfig = SuiteConfig()
    model: ModelConfig = ModelConfig()
    pretrain: TrainConfig = TrainConfig(epochs=1, batch_size=32, learning_rate=3e-3, optimizer="adam")
    target: str = "lr0"
    budget: int = 16
    ratios: tuple | None = None  # None: proportional to the layer-group sizes
    alpha: float = 10.0
    finetune: TrainConfig = TrainConfig(
        epochs=1000, batch_size=16, learning_rate=3e-3, optimizer="adam", max_steps=200
    )

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Suite:
    specs: tuple
    train: dict  # label -> Corpus
    held_out: dict

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.specs]

    def groups(self) -> list[str]:
        return ["high" if is_high_resource(l) else "low" for l in self.labels]


def build_suite(cfg: SuiteConfig, vocab_size: int) -> Suite:
    specs = make_benchmark_suite(
        cfg.n_high,
        cfg.n_low,
        vocab_size,
        cfg.overlap_fraction,
        low_budget=cfg.low_budget,
        ngram_order=cfg.ngram_order,
        seed=cfg.seed,
    )
    train_c, held = {}, {}
    for spec in specs:
        train_c[spec.label], held[spec.label] = generate(
            spec, spec.resource_level // cfg.seq_len, cfg.seq_len
        )
    return Suite(tuple(specs), train_c, held)


def pretrain_base(cfg: BenchmarkConfig, suite: Suite) -> tuple[MoeModel, list[float]]:
    """Train every parameter on all training corpora, mixed in proportion to size."""
    mixed = [seq for label in suite.labels for seq in suite.train[label].sequences]
    return pretrain(init_model(cfg.model), mixed, cfg.pretrain)


def collect_profiles(model: MoeModel, corpora: Mapping) -> list[RoutingProfile]:
    return [collect_profile(model, corpus, label) for label, corpus in corpora.items()]


def evaluate(model: MoeModel, corpora: Mapping) -> dict[str, float]:
    return {label: batch_loss(model, corpus.sequences) for label, corpus in corpora.items()}


def relative_change(after: Mapping, before: Mapping) -> dict[str, float]:
    return {k: (after[k] - before[k]) / before[k] for k in before}


@dataclass
class IsolationAnalysis:
    labels: list
    groups: list
    overlap: np.ndarray
    within: float
    cross: float
    reference: str
    regions: dict  # low-resource label -> (shallow, middle, deep)
    curves: dict

    @property
    def group_separated(self) -> bool:
        return self.cross < self.within

    @property
    def deep_below_middle(self) -> bool:
        return all(r[2] < r[1] for r in self.regions.values())


def isolation_analysis(
    profiles: list[RoutingProfile],
    groups: list[str],
    *,
    k: int = GLOBAL_TOPK,
    boundaries: tuple[int, int] | None = None,
    per_layer_topk: int | None = None,
) -> IsolationAnalysis:
    """Global top-k overlap between groups, and each low-resource language's
    layer-wise similarity to the first high-resource language."""
    n_layers = profiles[0].shape[0]
    boundaries = boundaries or default_boundaries(n_layers)
    matrix = overlap_matrix(profiles, k)
    within, cross = group_means(matrix, groups)
    reference = next(p for p, g in zip(profiles, groups) if g == "high")
    regions, curves = {}, {}
    for p, g in zip(profiles, groups):
        if g != "low":
            continue
        curve = layerwise_similarity(p, reference, per_layer_topk)
        curves[p.language] = curve
        regions[p.language] = region_average(curve, boundaries)
    return IsolationAnalysis(
        [p.language for p in profiles], groups, matrix, within, cross, reference.language, regions, curves
    )


@dataclass
class AdaptationOutcome:
    selection: Selection
    trained: MoeModel
    history: list
    base_loss: dict
    trained_loss: dict
    pruned_loss: dict
    overlap_mass: dict = field(default_factory=dict)

    @property
    def train_change(self) -> dict:
        return relative_change(self.trained_loss, self.base_loss)

    @property
    def prune_change(self) -> dict:
        return relative_change(self.pruned_loss, self.base_loss)

    def non_targets(self, *, include_disjoint: bool = False) -> list[str]:
        target = self.selection.config.target_language
        return [
            l for l in self.base_loss if l != target and (include_disjoint or self.overlap_mass[l] > 0)
        ]


def run_selective_training(
    cfg: BenchmarkConfig, base: MoeModel, suite: Suite, profiles: list[RoutingProfile]
) -> AdaptationOutcome:
    """Select, train the selection on the target, and separately prune it."""
    n_layers = base.config.n_layers
    boundaries = default_boundaries(n_layers)
    ratios = tuple(cfg.ratios) if cfg.ratios else proportional_ratios(n_layers, boundaries)
    sel_cfg = SelectionConfig(cfg.target, cfg.budget, boundaries, ratios, cfg.alpha)
    selection = select_subnetwork(ProfileMatrix.from_profiles(profiles), sel_cfg)
    mask = build_mask(selection.ids, base)
    trained, history = train(base, suite.train[cfg.target], mask, cfg.finetune)
    pruned = prune_experts(base, selection.ids)
    return AdaptationOutcome(
        selection=selection,
        trained=trained,
        history=history,
        base_loss=evaluate(base, suite.held_out),
        trained_loss=evaluate(trained, suite.held_out),
        pruned_loss=evaluate(pruned, suite.held_out),
        overlap_mass={p.language: overlap_mass(p, selection.ids) for p in profiles},
    )


@dataclass
class SweepTrial:
    target: str
    budget: int
    steps: int
    learning_rate: float
    results: dict  # label -> LanguagePerturbation

    @property
    def stable(self) -> bool:
        return all(r.routing_stable and r.within_hidden_bound for r in self.results.values())

    @property
    def holds(self) -> bool:
        return all(r.holds for r in self.results.values())


def perturbation_sweep(
    base: MoeModel,
    suite: Suite,
    profiles: list[RoutingProfile],
    n_trials: int = 100,
    *,
    seed: int = 0,
    max_attempts: int | None = None,
    max_budget: int = 16,
) -> tuple[list[SweepTrial], int]:
    """Seeded masked updates, each checked against the perturbation certificate.

    Each attempt picks a target language and budget, selects experts, takes a
    few plain gradient steps, and evaluates every language's held-out corpus.
    Attempts whose routing changed anywhere are discarded and counted.
    Returns (stable trials, number of discarded attempts)."""
    rng = np.random.default_rng(seed)
    labels = suite.labels
    matrix = ProfileMatrix.from_profiles(profiles)
    hidden = hidden_samples(base, list(suite.held_out.values()))
    boundaries = default_boundaries(base.config.n_layers)
    ratios = proportional_ratios(base.config.n_layers, boundaries)
    max_attempts = max_attempts or 3 * n_trials
    trials: list[SweepTrial] = []
    discarded = 0
    for _ in range(max_attempts):
        if len(trials) == n_trials:
            break
        target = labels[int(rng.integers(len(labels)))]
        budget = int(rng.integers(1, max_budget + 1))
        steps = int(rng.integers(1, 6))
        lr = float(10 ** rng.uniform(-3.0, -1.5))
        sel = select_subnetwork(matrix, SelectionConfig(target, budget, boundaries, ratios))
        cfg = TrainConfig(epochs=100, batch_size=16, learning_rate=lr, optimizer="sgd",
                          seed=int(rng.integers(2**32)), max_steps=steps)
        after, _ = train(base, suite.train[target], build_mask(sel.ids, base), cfg)
        lip = estimate_lipschitz(base, hidden, radius=max_input_change(base, after, sel.ids))
        results = perturbation_check(base, after, sel.ids, suite.held_out, lip)
        trial = SweepTrial(target, budget, steps, lr, results)
        if trial.stable:
            trials.append(trial)
        else:
            discarded += 1
    return trials, discarded
