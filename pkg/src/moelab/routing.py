"""Routing statistics per language and the overlap analyses built on them."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .model import ExpertId, MoeModel, check_tokens, vocab_table


@dataclass(frozen=True, eq=False)
class RoutingProfile:
    """Integer activation counts ``counts[l, i]`` of one language over
    ``token_total`` processed tokens.  Frequencies are derived on demand."""

    language: str
    token_total: int
    counts: np.ndarray  # (L, N) int64

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise InputError(f"counts must be 2-D, got shape {counts.shape}")
        if self.token_total < 1:
            raise InputError("token_total must be >= 1")
        if counts.min(initial=0) < 0 or counts.max(initial=0) > self.token_total:
            raise InputError("counts must lie in [0, token_total]")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def freqs(self) -> np.ndarray:
        return self.counts / self.token_total

    @property
    def top_k(self) -> int:
        """Experts activated per token, recovered from the layer-0 tally."""
        return int(self.counts[0].sum() // self.token_total)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RoutingProfile)
            and self.language == other.language
            and self.token_total == other.token_total
            and np.array_equal(self.counts, other.counts)
        )

    def __add__(self, other: "RoutingProfile") -> "RoutingProfile":
        if self.shape != other.shape:
            raise InputError("profile shapes differ")
        return RoutingProfile(
            self.language, self.token_total + other.token_total, self.counts + other.counts
        )

    def to_json(self) -> dict:
        return {
            "language": self.language,
            "token_total": int(self.token_total),
            "shape": list(self.shape),
            "counts": [int(c) for c in self.counts.reshape(-1)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RoutingProfile":
        try:
            shape = tuple(doc["shape"])
            counts = np.array(doc["counts"], dtype=np.int64).reshape(shape)
            return cls(doc["language"], int(doc["token_total"]), counts)
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"malformed profile document: {exc}") from exc


def save_profile(profile: RoutingProfile, path: Path) -> None:
    Path(path).write_text(json.dumps(profile.to_json(), separators=(",", ":")) + "\n")


def load_profile(path: Path) -> RoutingProfile:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not JSON") from exc
    return RoutingProfile.from_json(doc)


def token_histogram(model: MoeModel, corpus: Iterable[Sequence[int]]) -> np.ndarray:
    hist = np.zeros(model.config.vocab_size, dtype=np.int64)
    for seq in corpus:
        ids = check_tokens(model.config, seq)
        hist += np.bincount(ids, minlength=model.config.vocab_size)
    return hist


def collect_profile(
    model: MoeModel, corpus, language: str | None = None, *, exact: bool = False
) -> RoutingProfile:
    """Tally the binary activation indicator over every token of the corpus."""
    sequences = getattr(corpus, "sequences", corpus)
    if language is None:
        language = getattr(corpus, "language", "unknown")
    hist = token_histogram(model, sequences)
    total = int(hist.sum())
    if total == 0:
        raise InputError(f"corpus for {language!r} has no tokens")
    c = model.config
    selected = vocab_table(model, exact).selected  # (V, L, k)
    counts = np.zeros((c.n_layers, c.n_experts), dtype=np.int64)
    for l in range(c.n_layers):
        for r in range(c.top_k):
            np.add.at(counts[l], selected[:, l, r], hist)
    return RoutingProfile(language, total, counts)


def _ranked(counts: np.ndarray) -> list[ExpertId]:
    """All experts by descending count, ties by (layer, expert) ascending."""
    n_layers, n_experts = counts.shape
    flat = counts.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))
    return [ExpertId(int(j // n_experts), int(j % n_experts)) for j in order]


def global_topk(profile: RoutingProfile, k: int) -> frozenset:
    """The ``k`` most frequently activated experts over all layers."""
    n_layers, n_experts = profile.shape
    if not 1 <= k <= n_layers * n_experts:
        raise InputError(f"K must be in [1, {n_layers * n_experts}], got {k}")
    return frozenset(_ranked(profile.counts)[:k])


def layer_topk(profile: RoutingProfile, layer: int, k: int) -> frozenset:
    row = profile.counts[layer]
    order = np.lexsort((np.arange(row.size), -row))
    return frozenset(int(i) for i in order[:k])


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


@dataclass(frozen=True)
class SimilarityCurve:
    language: str
    reference: str
    values: tuple[float, ...]


def layerwise_similarity(
    profile: RoutingProfile, reference: RoutingProfile, per_layer_topk: int | None = None
) -> SimilarityCurve:
    """Per-layer Jaccard between the two languages' top experts.

    ``per_layer_topk`` defaults to the routing top-k recovered from the profile."""
    if profile.shape != reference.shape:
        raise InputError(f"profile shapes differ: {profile.shape} vs {reference.shape}")
    n_layers, n_experts = profile.shape
    k = profile.top_k if per_layer_topk is None else per_layer_topk
    if not 1 <= k <= n_experts:
        raise InputError(f"per_layer_topk must be in [1, {n_experts}], got {k}")
    values = tuple(
        jaccard(layer_topk(profile, l, k), layer_topk(reference, l, k)) for l in range(n_layers)
    )
    return SimilarityCurve(profile.language, reference.language, values)


def layer_groups(n_layers: int, boundaries: tuple[int, int]) -> tuple[range, range, range]:
    """Shallow [0, L1], middle (L1, L2], deep (L2, L-1]."""
    l1, l2 = boundaries
    if not 0 <= l1 < l2 < n_layers:
        raise InputError(f"boundaries must satisfy 0 <= L1 < L2 < L={n_layers}, got {boundaries}")
    return range(0, l1 + 1), range(l1 + 1, l2 + 1), range(l2 + 1, n_layers)


def default_boundaries(n_layers: int) -> tuple[int, int]:
    """The 37.5% / 25% / 37.5% split: (17, 29) for 48 layers, (2, 4) for 8."""
    shallow = int(round(0.375 * n_layers))
    middle = int(round(0.25 * n_layers))
    return shallow - 1, shallow - 1 + middle


def region_average(curve, boundaries: tuple[int, int]) -> tuple[float, float, float]:
    values = list(getattr(curve, "values", curve))
    groups = layer_groups(len(values), boundaries)
    if len(groups[2]) == 0:
        raise InputError(f"boundaries {boundaries} leave the deep region empty")
    return tuple(sum(values[i] for i in g) / len(g) for g in groups)


def overlap_matrix(profiles: Sequence[RoutingProfile], k: int) -> np.ndarray:
    if len(profiles) < 2:
        raise InputError("overlap_matrix needs at least two profiles")
    sets = [global_topk(p, k) for p in profiles]
    m = len(sets)
    out = np.ones((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            out[i, j] = out[j, i] = jaccard(sets[i], sets[j])
    return out


def group_means(matrix: np.ndarray, groups: Sequence) -> tuple[float, float]:
    """(within-group, cross-group) mean of the off-diagonal entries."""
    within, cross = [], []
    m = matrix.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            (within if groups[i] == groups[j] else cross).append(matrix[i, j])
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return mean(within), mean(cross)
