"""Base pre-training and masked selective training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, TrainingError
from .model import (
    PARAM_NAMES,
    ExpertId,
    MoeModel,
    backward,
    batch_loss,
    full_backward,
)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 2e-5
    seed: int = 0
    optimizer: str = "sgd"
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ParamMask:
    """Trainable parameters: the two FFN matrices of each listed expert."""

    experts: frozenset
    expert_param_count: int

    @property
    def n_params(self) -> int:
        return len(self.experts) * self.expert_param_count

    def __len__(self) -> int:
        return len(self.experts)


def build_mask(selected: Iterable[ExpertId], model: MoeModel) -> ParamMask:
    c = model.config
    experts = frozenset(c.check_expert(e) for e in selected)
    return ParamMask(experts=experts, expert_param_count=c.expert_param_count)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, key, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        m = self.m.get(key)
        if m is None:
            m = self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
        v = self.v[key]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**self.t)
        v_hat = v / (1 - self.beta2**self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _batches(sequences: Sequence, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(sequences))
    for start in range(0, len(order), batch_size):
        yield [sequences[j] for j in order[start : start + batch_size]]


def _check_loss(loss: float, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss", step)


def train(
    model: MoeModel, corpus: Sequence, mask: ParamMask, config: TrainConfig
) -> tuple[MoeModel, list[float]]:
    """Update only the masked experts on ``corpus`` with the causal LM loss.

    Every parameter outside the mask is carried over untouched, so it is
    bitwise identical in the returned model.  Returns the trained model and the
    per-step batch loss (measured before each update).
    """
    sequences = list(getattr(corpus, "sequences", corpus))
    if not sequences:
        raise InputError("training corpus is empty")
    c = model.config
    experts = sorted(c.check_expert(e) for e in mask.experts)
    w_in = np.array(model.w_in)
    w_out = np.array(model.w_out)
    rng = np.random.default_rng(config.seed)
    adam = Adam(config.learning_rate) if config.optimizer == "adam" else None
    history: list[float] = []
    step = 0
    current = model
    for _ in range(config.epochs):
        for batch in _batches(sequences, config.batch_size, rng):
            if config.max_steps is not None and step >= config.max_steps:
                return current, history
            if experts:
                grads = backward(current, batch, experts)
            loss = batch_loss(current, batch)
            _check_loss(loss, step)
            history.append(loss)
            if adam is not None:
                adam.t += 1
            for e in experts:
                g = grads[e]
                idx = (e.layer, e.expert)
                if adam is None:
                    w_in[idx] = w_in[idx] - config.learning_rate * g.w_in
                    w_out[idx] = w_out[idx] - config.learning_rate * g.w_out
                else:
                    w_in[idx] = adam.step(("w_in", idx), w_in[idx], g.w_in)
                    w_out[idx] = adam.step(("w_out", idx), w_out[idx], g.w_out)
                if not (np.all(np.isfinite(w_in[idx])) and np.all(np.isfinite(w_out[idx]))):
                    raise TrainingError(f"non-finite parameters in expert {tuple(e)}", step)
            current = model.replace(w_in=w_in, w_out=w_out)
            step += 1
    return current, history


def pretrain(
    model: MoeModel, sequences: Sequence, config: TrainConfig
) -> tuple[MoeModel, list[float]]:
    """Train every parameter (router and shared path included) on a mixed corpus.

    Produces the frozen "vanilla" model that the routing analysis studies."""
    sequences = list(sequences)
    if not sequences:
        raise InputError("pre-training corpus is empty")
    rng = np.random.default_rng(config.seed)
    adam = Adam(config.learning_rate) if config.optimizer == "adam" else None
    params = {name: np.array(getattr(model, name)) for name in PARAM_NAMES}
    history: list[float] = []
    step = 0
    for _ in range(config.epochs):
        for batch in _batches(sequences, config.batch_size, rng):
            if config.max_steps is not None and step >= config.max_steps:
                return model, history
            loss, grads = full_backward(model, batch)
            _check_loss(loss, step)
            history.append(loss)
            if adam is not None:
                adam.t += 1
            for name in PARAM_NAMES:
                g = getattr(grads, name)
                if adam is None:
                    params[name] = params[name] - config.learning_rate * g
                else:
                    params[name] = adam.step(name, params[name], g)
            try:
                model = model.replace(**params)
            except ConfigError as exc:
                raise TrainingError(str(exc), step) from exc
            step += 1
    return model, history
