from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest

from moelab.model import ModelConfig, MoeModel, init_model
from moelab.pipeline import (
    BenchmarkConfig,
    build_suite,
    collect_profiles,
    isolation_analysis,
    pretrain_base,
    run_selective_training,
)

TINY = ModelConfig(vocab_size=12, d_model=4, d_expert_hidden=3, n_layers=3, n_experts=4, top_k=2,
                   max_seq_len=16, seed=3)


@pytest.fixture
def tiny_model() -> MoeModel:
    return init_model(TINY)


@pytest.fixture(scope="session")
def default_model() -> MoeModel:
    return init_model(ModelConfig())


def random_batch(rng: np.random.Generator, vocab: int, n_seq: int, max_len: int) -> list:
    return [tuple(int(t) for t in rng.integers(0, vocab, size=int(rng.integers(2, max_len + 1))))
            for _ in range(n_seq)]


# Hand-set model: three layers of width 2 with two experts and k = 1.  Layers 1
# and 2 are inert (no shared map, zero expert outputs) and their routers are
# zero, so ties send every token to expert 0 there.  Layer 0 routes on the sign
# of coordinate 0.
HAND_EMBED = np.array([[1.0, 0.5], [-1.0, 0.5], [0.5, -2.0]])


def hand_model() -> MoeModel:
    cfg = ModelConfig(vocab_size=3, d_model=2, d_expert_hidden=1, n_layers=3, n_experts=2, top_k=1,
                      max_seq_len=8, seed=0)
    router = np.zeros((3, 2, 2))
    router[0] = [[2.0, -1.0], [0.0, 0.0]]
    shared = np.zeros((3, 2, 2))
    shared[0] = [[0.1, 0.0], [0.0, 0.2]]
    w_in = np.zeros((3, 2, 2, 1))
    w_in[:, 0] = [[1.0], [1.0]]
    w_in[:, 1] = [[-1.0], [2.0]]
    w_out = np.zeros((3, 2, 1, 2))
    w_out[0, 0] = [[0.5, -1.0]]
    w_out[0, 1] = [[2.0, 0.25]]
    head = np.array([[1.0, 0.0, -1.0], [0.0, 1.0, 0.5]])
    return MoeModel(cfg, HAND_EMBED.copy(), router, shared, w_in, w_out, head, np.zeros((3, 2), bool))


def hand_silu(x: float) -> float:
    return x / (1.0 + math.exp(-x))


@pytest.fixture(scope="session")
def benchmark():
    """The default desk-scale benchmark, run once per session (a few seconds)."""
    cfg = BenchmarkConfig()
    suite = build_suite(cfg.suite, cfg.model.vocab_size)
    base, history = pretrain_base(cfg, suite)
    profiles = collect_profiles(base, suite.train)
    analysis = isolation_analysis(profiles, suite.groups())
    outcome = run_selective_training(cfg, base, suite, profiles)
    return SimpleNamespace(cfg=cfg, suite=suite, base=base, history=history, profiles=profiles,
                           analysis=analysis, outcome=outcome)
