"""Layer-aware expert subnetwork selection for a target language.

Shallow and deep layers are ranked by target specificity, middle layers by
cross-language overlap; both scores are boosted by activation magnitude.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .model import ExpertId
from .routing import RoutingProfile, layer_groups

GROUP_NAMES = ("shallow", "middle", "deep")
DEFAULT_ALPHA = 10.0
# floor() guard so that e.g. 100 * 0.29 == 28.999999999999996 still floors to 29.
_FLOOR_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class ProfileMatrix:
    """Per-layer language x expert activation frequencies, stacked as (M, L, N)."""

    languages: tuple[str, ...]
    freqs: np.ndarray

    @classmethod
    def from_profiles(cls, profiles: Sequence[RoutingProfile]) -> "ProfileMatrix":
        if not profiles:
            raise InputError("no profiles given")
        shapes = {p.shape for p in profiles}
        if len(shapes) != 1:
            raise InputError(f"profiles disagree on shape: {sorted(shapes)}")
        langs = tuple(p.language for p in profiles)
        if len(set(langs)) != len(langs):
            raise InputError("duplicate language labels")
        return cls(langs, np.stack([p.freqs for p in profiles]))

    def layer(self, l: int) -> np.ndarray:
        """A^(l): rows are languages, columns experts."""
        return self.freqs[:, l, :]

    def index(self, language: str) -> int:
        try:
            return self.languages.index(language)
        except ValueError:
            raise InputError(f"target language {language!r} not among {self.languages}") from None

    @property
    def n_layers(self) -> int:
        return self.freqs.shape[1]

    @property
    def n_experts(self) -> int:
        return self.freqs.shape[2]


@dataclass(frozen=True)
class SelectionConfig:
    target_language: str
    budget: int
    boundaries: tuple[int, int]
    ratios: tuple[float, float, float] = (0.35, 0.25, 0.40)
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ConfigError(f"budget K must be >= 1, got {self.budget}")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigError(f"ratios must be three non-negative values, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"ratios must sum to 1, got {sum(self.ratios)!r}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        l1, l2 = self.boundaries
        if not 0 <= l1 < l2:
            raise ConfigError(f"boundaries must satisfy 0 <= L1 < L2, got {self.boundaries}")

    def check_shape(self, n_layers: int, n_experts: int) -> None:
        if not self.boundaries[1] < n_layers:
            raise ConfigError(f"L2={self.boundaries[1]} must be < L={n_layers}")
        if self.budget > n_layers * n_experts:
            raise ConfigError(f"budget K={self.budget} exceeds the {n_layers * n_experts} experts")


@dataclass(frozen=True)
class ScoredExpert:
    id: ExpertId
    score: float
    kind: str  # "specificity" | "overlap"
    phase: int  # 1 shallow, 2 middle, 3 deep


@dataclass(frozen=True)
class Selection:
    config: SelectionConfig
    budgets: tuple[int, int, int]
    experts: tuple[ScoredExpert, ...]  # sorted by (layer, expert)

    @property
    def ids(self) -> frozenset:
        return frozenset(e.id for e in self.experts)

    def to_json(self) -> dict:
        c = self.config
        return {
            "target": c.target_language,
            "K": c.budget,
            "boundaries": list(c.boundaries),
            "ratios": list(c.ratios),
            "alpha": c.alpha,
            "budgets": list(self.budgets),
            "experts": [
                {
                    "layer": e.id.layer,
                    "expert": e.id.expert,
                    "score": round(float(e.score), 6),
                    "kind": e.kind,
                    "phase": e.phase,
                }
                for e in self.experts
            ],
        }


def save_selection(selection: Selection, path: Path) -> None:
    Path(path).write_text(json.dumps(selection.to_json(), indent=2) + "\n")


def load_selection_ids(path: Path) -> frozenset:
    try:
        doc = json.loads(Path(path).read_text())
        return frozenset(ExpertId(int(e["layer"]), int(e["expert"])) for e in doc["experts"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed selection file ({exc})") from exc


# --- scores ---------------------------------------------------------------------
# Each function accepts scalars or numpy arrays.  Means and variances are plain
# left-to-right sums over languages so the arithmetic is reproducible.


def specificity(a_target, a_mean):
    """a_target / a_mean, and 0 where a_mean is 0."""
    a_target = np.asarray(a_target, dtype=np.float64)
    a_mean = np.asarray(a_mean, dtype=np.float64)
    out = np.divide(a_target, a_mean, out=np.zeros(np.broadcast(a_target, a_mean).shape), where=a_mean > 0)
    return out if out.ndim else float(out)


def _seq_mean(column: np.ndarray) -> np.ndarray:
    total = column[0]
    for row in column[1:]:
        total = total + row
    return total / column.shape[0]


def language_mean(column) -> np.ndarray:
    """Mean over axis 0 (languages)."""
    return _seq_mean(np.asarray(column, dtype=np.float64))


def overlap_score(column):
    """1 / (1 + sigma/mu) over axis 0, population sigma; 0 where mu is 0."""
    column = np.asarray(column, dtype=np.float64)
    if column.shape[0] < 2:
        raise InputError(f"overlap score needs at least 2 languages, got {column.shape[0]}")
    mu = _seq_mean(column)
    sigma = np.sqrt(_seq_mean((column - mu) ** 2))
    safe_mu = np.where(mu > 0, mu, 1.0)
    out = np.where(mu > 0, 1.0 / (1.0 + sigma / safe_mu), 0.0)
    return out if out.ndim else float(out)


def composite_spec(s, a_target, alpha: float = DEFAULT_ALPHA):
    return s * (1.0 + alpha * a_target)


def composite_ovlp(o, a_mean, alpha: float = DEFAULT_ALPHA):
    return o * (1.0 + alpha * a_mean)


def proportional_ratios(n_layers: int, boundaries: tuple[int, int]) -> tuple[float, float, float]:
    """Budget shares equal to each layer group's share of the layers."""
    sizes = [len(g) for g in layer_groups(n_layers, boundaries)]
    return tuple(n / n_layers for n in sizes)


def allocate_budget(k: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    k_s = math.floor(k * ratios[0] + _FLOOR_EPS)
    k_m = math.floor(k * ratios[1] + _FLOOR_EPS)
    return k_s, k_m, k - k_s - k_m


# --- selection ----------------------------------------------------------------------


def score_tables(profiles: ProfileMatrix, config: SelectionConfig) -> tuple[np.ndarray, np.ndarray]:
    """(Spec, Ovlp) composite scores, each of shape (L, N)."""
    target = profiles.freqs[profiles.index(config.target_language)]
    mean = language_mean(profiles.freqs)
    spec = composite_spec(specificity(target, mean), target, config.alpha)
    ovlp = composite_ovlp(overlap_score(profiles.freqs), mean, config.alpha)
    return spec, ovlp


def select_subnetwork(profiles: ProfileMatrix, config: SelectionConfig) -> Selection:
    n_layers, n_experts = profiles.n_layers, profiles.n_experts
    config.check_shape(n_layers, n_experts)
    budgets = allocate_budget(config.budget, config.ratios)
    spec, ovlp = score_tables(profiles, config)
    groups = layer_groups(n_layers, config.boundaries)
    phases = (
        (groups[0], budgets[0], spec, "specificity"),
        (groups[1], budgets[1], ovlp, "overlap"),
        (groups[2], budgets[2], spec, "specificity"),
    )
    chosen: dict[ExpertId, ScoredExpert] = {}
    for phase, (layers, k_g, table, kind) in enumerate(phases, start=1):
        if k_g == 0:
            continue
        cand = [
            (l, i) for l in layers for i in range(n_experts) if ExpertId(l, i) not in chosen
        ]
        if len(cand) < k_g:
            raise ConfigError(
                f"{GROUP_NAMES[phase - 1]} group has {len(cand)} candidate experts, budget is {k_g}"
            )
        ls = np.array([c[0] for c in cand])
        is_ = np.array([c[1] for c in cand])
        scores = table[ls, is_]
        order = np.lexsort((is_, ls, -scores))[:k_g]
        for j in order:
            eid = ExpertId(int(ls[j]), int(is_[j]))
            chosen[eid] = ScoredExpert(eid, float(scores[j]), kind, phase)
    experts = tuple(sorted(chosen.values(), key=lambda e: e.id))
    return Selection(config, budgets, experts)
