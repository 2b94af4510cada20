"""Toy mixture-of-experts language model with an analytic backward pass.

Layer ``l`` maps a hidden state ``h`` to

    h + h @ U[l] + sum_{i in topk(h @ R[l])} w_i * silu(h @ W_in[l, i]) @ W_out[l, i]

where ``w`` is the softmax of the selected router logits.  There is no attention,
so a position's hidden state depends only on its token id.  Every forward pass
therefore evaluates the whole vocabulary once ("the table") and gathers rows;
the causal LM loss of a batch depends on the batch only through its bigram counts.

Summation order is fixed: experts are combined in ascending index order, and
``(h + h @ U) + moe`` is evaluated in that association.  With ``exact=True``
every matrix product is an explicit left-to-right accumulation over the inner
dimension, so a row's result never depends on which other rows share the call.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError


class ExpertId(NamedTuple):
    layer: int
    expert: int


# Sets of ExpertId are plain frozensets; the alias documents intent.
ExpertSet = frozenset


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    d_expert_hidden: int = 32
    n_layers: int = 8
    n_experts: int = 8
    top_k: int = 2
    max_seq_len: int = 64
    seed: int = 7

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "d_expert_hidden", "n_experts", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 3:
            raise ConfigError(f"n_layers must be >= 3, got {self.n_layers}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k must satisfy 1 <= top_k <= n_experts ({self.n_experts}), got {self.top_k}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def expert_param_count(self) -> int:
        return 2 * self.d_model * self.d_expert_hidden

    @property
    def param_count(self) -> int:
        v, d, n, n_layers = self.vocab_size, self.d_model, self.n_experts, self.n_layers
        per_layer = d * n + d * d + n * self.expert_param_count
        return v * d + n_layers * per_layer + d * v

    def check_expert(self, eid: ExpertId) -> ExpertId:
        layer, expert = eid
        if not (0 <= layer < self.n_layers and 0 <= expert < self.n_experts):
            raise InputError(
                f"expert id {tuple(eid)} outside [0, {self.n_layers}) x [0, {self.n_experts})"
            )
        return ExpertId(int(layer), int(expert))

    def all_experts(self) -> frozenset:
        return frozenset(
            ExpertId(l, i) for l in range(self.n_layers) for i in range(self.n_experts)
        )


PARAM_NAMES = ("embed", "router", "shared", "w_in", "w_out", "head")


@dataclass(frozen=True, eq=False)
class MoeModel:
    config: ModelConfig
    embed: np.ndarray  # (V, d)
    router: np.ndarray  # (L, d, N)
    shared: np.ndarray  # (L, d, d)
    w_in: np.ndarray  # (L, N, d, H)
    w_out: np.ndarray  # (L, N, H, d)
    head: np.ndarray  # (d, V)
    pruned: np.ndarray  # (L, N) bool, True = removed from routing candidacy

    def __post_init__(self) -> None:
        c = self.config
        v, d, h, n, n_layers = c.vocab_size, c.d_model, c.d_expert_hidden, c.n_experts, c.n_layers
        shapes = {
            "embed": (v, d),
            "router": (n_layers, d, n),
            "shared": (n_layers, d, d),
            "w_in": (n_layers, n, d, h),
            "w_out": (n_layers, n, h, d),
            "head": (d, v),
        }
        for name, shape in shapes.items():
            arr = np.array(getattr(self, name), dtype=np.float64, order="C")
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        pruned = np.array(self.pruned, dtype=bool)
        if pruned.shape != (n_layers, n):
            raise ConfigError(f"pruned has shape {pruned.shape}, expected {(n_layers, n)}")
        if np.any((~pruned).sum(axis=1) < c.top_k):
            raise ConfigError("pruning leaves fewer than top_k routable experts in some layer")
        pruned.setflags(write=False)
        object.__setattr__(self, "pruned", pruned)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **changes) -> "MoeModel":
        return dataclasses.replace(self, **changes)

    def bitwise_equal(self, other: "MoeModel") -> bool:
        if self.config != other.config:
            return False
        if not np.array_equal(self.pruned, other.pruned):
            return False
        return all(
            getattr(self, name).tobytes() == getattr(other, name).tobytes() for name in PARAM_NAMES
        )


def init_model(config: ModelConfig) -> MoeModel:
    """Draw every parameter from one PCG64 stream seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    v, d, h, n, n_layers = (
        config.vocab_size,
        config.d_model,
        config.d_expert_hidden,
        config.n_experts,
        config.n_layers,
    )
    embed = rng.normal(0.0, 1.0, size=(v, d))
    router = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_layers, d, n))
    shared = rng.normal(0.0, 0.1 / np.sqrt(d), size=(n_layers, d, d))
    w_in = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_layers, n, d, h))
    w_out = rng.normal(0.0, 0.5 / np.sqrt(h), size=(n_layers, n, h, d))
    head = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, v))
    return MoeModel(
        config=config,
        embed=embed,
        router=router,
        shared=shared,
        w_in=w_in,
        w_out=w_out,
        head=head,
        pruned=np.zeros((n_layers, n), dtype=bool),
    )


# --- elementwise pieces -------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


# Upper bound on |silu'(x)| over the real line (true max is about 1.0998).
SILU_SLOPE_BOUND = 1.1


def matmul(a: np.ndarray, b: np.ndarray, exact: bool = False) -> np.ndarray:
    if not exact:
        return a @ b
    out = a[:, 0:1] * b[0]
    for j in range(1, a.shape[1]):
        out = out + a[:, j : j + 1] * b[j]
    return out


def _rowsum(x: np.ndarray) -> np.ndarray:
    out = x[:, 0].copy()
    for j in range(1, x.shape[1]):
        out = out + x[:, j]
    return out


def log_softmax(x: np.ndarray, exact: bool = False) -> np.ndarray:
    m = np.max(x, axis=1, keepdims=True)
    shifted = x - m
    e = np.exp(shifted)
    s = _rowsum(e) if exact else e.sum(axis=1)
    return shifted - np.log(s)[:, None]


def select_topk(z: np.ndarray, k: int) -> np.ndarray:
    """Top-k column indices per row, ties to the lower index, returned ascending."""
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


# --- the vocabulary table -------------------------------------------------------


@dataclass
class _ExpertCache:
    rows: np.ndarray  # table rows routed to this expert
    slot: np.ndarray  # column of the expert inside the row's top-k set
    pre: np.ndarray
    act: np.ndarray
    out: np.ndarray  # ungated expert output


@dataclass
class _LayerCache:
    h: np.ndarray  # (V, d) layer input
    selected: np.ndarray  # (V, k)
    gates: np.ndarray  # (V, k)
    experts: list


@dataclass
class VocabTable:
    layers: list
    final: np.ndarray  # (V, d)
    logits: np.ndarray  # (V, V)

    @property
    def selected(self) -> np.ndarray:
        """Routing of every token id, shape (V, L, k)."""
        return np.stack([lc.selected for lc in self.layers], axis=1)

    @property
    def gates(self) -> np.ndarray:
        return np.stack([lc.gates for lc in self.layers], axis=1)

    @property
    def hidden(self) -> np.ndarray:
        """Layer inputs for every token id, shape (V, L, d)."""
        return np.stack([lc.h for lc in self.layers], axis=1)


def _layer_forward(model: MoeModel, l: int, h: np.ndarray, exact: bool):
    c = model.config
    z = matmul(h, model.router[l], exact)
    if model.pruned[l].any():
        z = np.where(model.pruned[l], -np.inf, z)
    selected = select_topk(z, c.top_k)
    zs = np.take_along_axis(z, selected, axis=1)
    e = np.exp(zs - np.max(zs, axis=1, keepdims=True))
    gates = e / _rowsum(e)[:, None]

    mixed = np.zeros_like(h)
    experts: list = [None] * c.n_experts
    for i in range(c.n_experts):
        rows, slot = np.nonzero(selected == i)
        if rows.size == 0:
            continue
        pre = matmul(h[rows], model.w_in[l, i], exact)
        act = silu(pre)
        out = matmul(act, model.w_out[l, i], exact)
        mixed[rows] += gates[rows, slot][:, None] * out
        experts[i] = _ExpertCache(rows, slot, pre, act, out)

    h_next = (h + matmul(h, model.shared[l], exact)) + mixed
    return h_next, _LayerCache(h, selected, gates, experts)


def vocab_table(model: MoeModel, exact: bool = False) -> VocabTable:
    h = np.array(model.embed)
    layers = []
    for l in range(model.config.n_layers):
        h, cache = _layer_forward(model, l, h, exact)
        layers.append(cache)
    logits = matmul(h, model.head, exact)
    return VocabTable(layers=layers, final=h, logits=logits)


# --- public forward / loss ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RoutingTrace:
    """Per-position routing: ``experts[t, l]`` are the k activated experts
    (ascending) and ``gates[t, l]`` their combination weights."""

    experts: np.ndarray  # (T, L, k) int
    gates: np.ndarray  # (T, L, k)

    def activated(self, t: int, layer: int) -> frozenset:
        return frozenset(int(i) for i in self.experts[t, layer])

    def equals(self, other: "RoutingTrace") -> bool:
        return np.array_equal(self.experts, other.experts)


def check_tokens(config: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size > config.max_seq_len:
        raise InputError(f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    return ids


def forward(model: MoeModel, tokens: Sequence[int], *, exact: bool = False):
    """Logits (T x V) and routing trace for one token sequence."""
    ids = check_tokens(model.config, tokens)
    table = vocab_table(model, exact)
    trace = RoutingTrace(experts=table.selected[ids], gates=table.gates[ids])
    return table.logits[ids], trace


def loss_lm(logits: np.ndarray, targets: Sequence[int]) -> float:
    """Mean next-token NLL.  ``logits[t]`` must already be aligned with
    ``targets[t]``; for a sequence ``x`` pass ``logits[:-1]`` and ``x[1:]``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise InputError(
            f"logits rows ({logits.shape[0] if logits.ndim else 0}) and targets ({targets.size}) differ"
        )
    if targets.size == 0:
        raise InputError("no predicted positions")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise InputError("target id out of range")
    logp = log_softmax(logits)
    return float(-np.mean(logp[np.arange(targets.size), targets]))


def bigram_counts(config: ModelConfig, batch: Iterable[Sequence[int]]) -> tuple[np.ndarray, int]:
    """(V x V) counts of (input id, next id) pairs over the batch, and their total."""
    v = config.vocab_size
    counts = np.zeros(v * v, dtype=np.int64)
    for seq in batch:
        ids = check_tokens(config, seq)
        if ids.size > 1:
            counts += np.bincount(ids[:-1] * v + ids[1:], minlength=v * v)
    counts = counts.reshape(v, v)
    return counts, int(counts.sum())


def batch_loss(model: MoeModel, batch: Iterable[Sequence[int]], *, exact: bool = False) -> float:
    """Mean causal LM loss over every predicted position in the batch."""
    counts, n_pos = bigram_counts(model.config, batch)
    if n_pos == 0:
        raise InputError("batch has no predicted positions")
    table = vocab_table(model, exact)
    return loss_from_counts(table, counts, n_pos)


def loss_from_counts(table: VocabTable, counts: np.ndarray, n_pos: int) -> float:
    logp = log_softmax(table.logits)
    return float(-(counts * logp).sum() / n_pos)


# --- backward -------------------------------------------------------------------


class ExpertGrad(NamedTuple):
    w_in: np.ndarray
    w_out: np.ndarray


@dataclass
class FullGradients:
    embed: np.ndarray
    router: np.ndarray
    shared: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    head: np.ndarray


def _backward(model: MoeModel, counts: np.ndarray, n_pos: int, full: bool):
    """Returns (loss, table, expert grads (L x N list), FullGradients | None)."""
    c = model.config
    table = vocab_table(model)
    logp = log_softmax(table.logits)
    loss = float(-(counts * logp).sum() / n_pos)
    row_total = counts.sum(axis=1)
    live = row_total > 0
    g_logits = (row_total[:, None] * np.exp(logp) - counts) / n_pos

    grads = FullGradients(
        embed=np.zeros_like(model.embed),
        router=np.zeros_like(model.router),
        shared=np.zeros_like(model.shared),
        w_in=np.zeros_like(model.w_in),
        w_out=np.zeros_like(model.w_out),
        head=table.final.T @ g_logits if full else np.zeros_like(model.head),
    )
    expert_seen = np.zeros((c.n_layers, c.n_experts), dtype=bool)

    delta = g_logits @ model.head.T
    for l in reversed(range(c.n_layers)):
        lc = table.layers[l]
        h = lc.h
        if full:
            grads.shared[l] = h.T @ delta
        dh = delta + delta @ model.shared[l].T
        d_gate = np.zeros_like(lc.gates)
        for i, ec in enumerate(lc.experts):
            if ec is None:
                continue
            keep = live[ec.rows]
            if not keep.any():
                continue
            rows, slot = ec.rows[keep], ec.slot[keep]
            d_out = delta[rows]
            d_gate[rows, slot] = np.sum(d_out * ec.out[keep], axis=1)
            d_f = lc.gates[rows, slot][:, None] * d_out
            grads.w_out[l, i] = ec.act[keep].T @ d_f
            d_pre = (d_f @ model.w_out[l, i].T) * silu_grad(ec.pre[keep])
            grads.w_in[l, i] = h[rows].T @ d_pre
            dh[rows] += d_pre @ model.w_in[l, i].T
            expert_seen[l, i] = True
        # softmax over the selected logits
        d_sel = lc.gates * (d_gate - np.sum(lc.gates * d_gate, axis=1, keepdims=True))
        d_z = np.zeros((h.shape[0], c.n_experts))
        np.put_along_axis(d_z, lc.selected, d_sel, axis=1)
        if full:
            grads.router[l] = h.T @ d_z
        dh += d_z @ model.router[l].T
        delta = dh
    if full:
        grads.embed = delta
    return loss, table, grads, expert_seen


def backward(
    model: MoeModel, batch: Iterable[Sequence[int]], trainable: Iterable[ExpertId]
) -> dict:
    """Analytic loss gradients for the trainable experts only.

    Returns ``{ExpertId: ExpertGrad}`` with one entry per trainable expert.  An
    expert that no predicted position routes through gets exact zero tensors.
    Router, shared path, embeddings and head never receive gradients here.
    """
    c = model.config
    wanted = sorted({c.check_expert(e) for e in trainable})
    if not wanted:
        return {}
    counts, n_pos = bigram_counts(c, batch)
    if n_pos == 0:
        raise InputError("batch has no predicted positions")
    _, _, grads, _ = _backward(model, counts, n_pos, full=False)
    return {
        e: ExpertGrad(grads.w_in[e.layer, e.expert].copy(), grads.w_out[e.layer, e.expert].copy())
        for e in wanted
    }


def full_backward(model: MoeModel, batch: Iterable[Sequence[int]]):
    """Loss and gradients for every parameter; used for base pre-training only."""
    counts, n_pos = bigram_counts(model.config, batch)
    if n_pos == 0:
        raise InputError("batch has no predicted positions")
    loss, _, grads, _ = _backward(model, counts, n_pos, full=True)
    return loss, grads


# --- pruning --------------------------------------------------------------------


def prune_experts(model: MoeModel, victims: Iterable[ExpertId]) -> MoeModel:
    """Remove experts from routing candidacy; their weights stay in place."""
    c = model.config
    victims = {c.check_expert(e) for e in victims}
    pruned = np.array(model.pruned)
    for e in victims:
        pruned[e.layer, e.expert] = True
    survivors = (~pruned).sum(axis=1)
    bad = np.nonzero(survivors < c.top_k)[0]
    if bad.size:
        raise ConfigError(
            f"pruning leaves {int(survivors[bad[0]])} routable experts in layer {int(bad[0])}, "
            f"need at least top_k={c.top_k}"
        )
    return model.replace(pruned=pruned)
