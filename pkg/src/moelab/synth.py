"""Seeded n-gram "languages" over regions of a shared token vocabulary."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

HIGH_TO_LOW_BUDGET = 10
TRAIN_FRACTION_NUM, TRAIN_FRACTION_DEN = 9, 10


@dataclass(frozen=True)
class LanguageSpec:
    label: str
    vocab_range: tuple[int, int]  # half-open [lo, hi)
    overlap_tokens: tuple[int, ...] = ()
    resource_level: int = 1000
    ngram_order: int = 2
    seed: int = 0
    vocab_size: int | None = None
    # Dirichlet concentration of the per-context next-token distributions.
    sharpness: float = 0.1
    # Share of next-token mass that depends on the context; the rest is the unigram.
    context_weight: float = 0.9
    zipf_exponent: float = 1.0

    def __post_init__(self) -> None:
        lo, hi = self.vocab_range
        if not 0 <= lo < hi:
            raise ConfigError(f"{self.label}: vocab_range {self.vocab_range} is empty or negative")
        if self.vocab_size is not None and hi > self.vocab_size:
            raise ConfigError(f"{self.label}: vocab_range exceeds vocab_size {self.vocab_size}")
        if self.resource_level < 1:
            raise ConfigError(f"{self.label}: resource_level must be >= 1")
        if self.ngram_order < 1:
            raise ConfigError(f"{self.label}: ngram_order must be >= 1")
        if not 0.0 <= self.context_weight <= 1.0:
            raise ConfigError(f"{self.label}: context_weight must be in [0, 1]")
        bad = [t for t in self.overlap_tokens if t < 0 or (self.vocab_size and t >= self.vocab_size)]
        if bad:
            raise ConfigError(f"{self.label}: overlap token {bad[0]} outside the vocabulary")

    @property
    def tokens(self) -> np.ndarray:
        lo, hi = self.vocab_range
        return np.array(sorted(set(range(lo, hi)) | set(self.overlap_tokens)), dtype=np.int64)

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab_range"] = list(self.vocab_range)
        d["overlap_tokens"] = list(self.overlap_tokens)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LanguageSpec":
        d = dict(d)
        d["vocab_range"] = tuple(d["vocab_range"])
        d["overlap_tokens"] = tuple(d["overlap_tokens"])
        return cls(**d)


@dataclass(frozen=True)
class Corpus:
    language: str
    sequences: tuple  # of tuple[int, ...]
    split: str = "train"

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)

    def token_types(self) -> set:
        return {t for s in self.sequences for t in s}


def _unigram(spec: LanguageSpec) -> np.ndarray:
    """Zipf-shaped weights over the language's tokens in a seeded rank order."""
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.tokens.size
    ranks = rng.permutation(n)
    w = (ranks + 1.0) ** -spec.zipf_exponent
    return w / w.sum()


@lru_cache(maxsize=None)
def _context_dist(spec: LanguageSpec, context: tuple) -> np.ndarray:
    base = _unigram(spec)
    if not context:
        return base
    rng = np.random.default_rng([spec.seed, 1, *context])
    peaked = rng.dirichlet(np.full(base.size, spec.sharpness))
    p = spec.context_weight * peaked + (1.0 - spec.context_weight) * base
    return p / p.sum()


def sampling_distribution(spec: LanguageSpec, context: tuple = ()) -> tuple[np.ndarray, np.ndarray]:
    """(token ids, probabilities) of the next token after ``context``.

    Only the last ``ngram_order - 1`` context tokens are used."""
    keep = spec.ngram_order - 1
    ctx = tuple(int(t) for t in context[len(context) - keep :]) if keep else ()
    if keep and len(ctx) < keep:
        ctx = ()
    return spec.tokens, _context_dist(spec, ctx)


def generate(spec: LanguageSpec, n_sequences: int, seq_len: int) -> tuple[Corpus, Corpus]:
    """Sample ``n_sequences`` sequences and split them 90/10 (prefix) into
    (train, held-out)."""
    if n_sequences < 1 or seq_len < 1:
        raise ConfigError("n_sequences and seq_len must be >= 1")
    if n_sequences * seq_len > spec.resource_level:
        raise ConfigError(
            f"{spec.label}: {n_sequences} x {seq_len} tokens exceeds resource_level {spec.resource_level}"
        )
    tokens = spec.tokens
    rng = np.random.default_rng([spec.seed, 2])
    keep = spec.ngram_order - 1
    seqs = []
    for _ in range(n_sequences):
        seq: list[int] = []
        for _ in range(seq_len):
            _, p = sampling_distribution(spec, tuple(seq[-keep:]) if keep else ())
            seq.append(int(tokens[rng.choice(tokens.size, p=p)]))
        seqs.append(tuple(seq))
    n_train = max(1, (n_sequences * TRAIN_FRACTION_NUM) // TRAIN_FRACTION_DEN)
    if n_sequences > 1:
        n_train = min(n_train, n_sequences - 1)
    return (
        Corpus(spec.label, tuple(seqs[:n_train]), "train"),
        Corpus(spec.label, tuple(seqs[n_train:]), "held-out"),
    )


def make_benchmark_suite(
    n_high: int,
    n_low: int,
    vocab_size: int,
    overlap_fraction: float = 0.0,
    *,
    low_budget: int = 2048,
    ngram_order: int = 2,
    zipf_exponent: float = 1.0,
    context_weight: float = 0.9,
    seed: int = 0,
) -> list[LanguageSpec]:
    """High-resource languages get ten times the token budget of low-resource ones.

    The vocabulary is cut into contiguous, near-equal ranges, one per language.
    The first ``round(overlap_fraction * |range|)`` ids of each range are shared
    with every other language."""
    n = n_high + n_low
    if n_high < 0 or n_low < 0 or n < 1:
        raise ConfigError("need at least one language")
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ConfigError(f"overlap_fraction must be in [0, 1], got {overlap_fraction}")
    if vocab_size < n:
        raise ConfigError(f"vocab_size {vocab_size} cannot hold {n} language ranges")
    parts = np.array_split(np.arange(vocab_size), n)
    ranges = [(int(p[0]), int(p[-1]) + 1) for p in parts]
    shared = [tuple(range(lo, lo + int(round(overlap_fraction * (hi - lo))))) for lo, hi in ranges]
    labels = [f"hr{i}" for i in range(n_high)] + [f"lr{i}" for i in range(n_low)]
    specs = []
    for j, label in enumerate(labels):
        others = tuple(sorted(t for i, s in enumerate(shared) if i != j for t in s))
        budget = low_budget * (HIGH_TO_LOW_BUDGET if j < n_high else 1)
        lang_seed = int(np.random.SeedSequence([seed, j]).generate_state(1, np.uint64)[0])
        specs.append(
            LanguageSpec(
                label=label,
                vocab_range=ranges[j],
                overlap_tokens=others,
                resource_level=budget,
                ngram_order=ngram_order,
                zipf_exponent=zipf_exponent,
                context_weight=context_weight,
                seed=lang_seed,
                vocab_size=vocab_size,
            )
        )
    return specs


def is_high_resource(label: str) -> bool:
    return label.startswith("hr")


# --- files ------------------------------------------------------------------------


def write_corpus(corpus: Corpus, path: Path) -> None:
    path = Path(path)
    path.write_text("".join(" ".join(map(str, s)) + "\n" for s in corpus.sequences))


def read_corpus(path: Path, language: str | None = None, split: str = "train") -> Corpus:
    path = Path(path)
    seqs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            seqs.append(tuple(int(t) for t in line.split()))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: not a token id list") from exc
    return Corpus(language or path.stem, tuple(seqs), split)


def write_suite_manifest(specs: list[LanguageSpec], files: dict, path: Path) -> None:
    doc = {
        "languages": [
            {"spec": s.to_json(), "files": {k: v if isinstance(v, (int, str)) else str(v) for k, v in files[s.label].items()}}
            for s in specs
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_suite_manifest(path: Path) -> list[tuple[LanguageSpec, dict]]:
    doc = json.loads(Path(path).read_text())
    return [(LanguageSpec.from_json(e["spec"]), e["files"]) for e in doc["languages"]]
