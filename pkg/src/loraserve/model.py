"""Deterministic toy autoregressive model with one LoRA attach point per layer.

The next token depends only on the hidden state of the previous token, so a
single decode step costs ``O(L * d^2 + d * V)`` and a sample's output is
independent of whatever else shares its batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, ShapeError
from .lora import LoraPair, batch_lora_forward


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 2048
    hidden_dim: int = 64
    num_layers: int = 4
    seed: int = 0
    eos_token: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.hidden_dim < 2:
            raise ConfigError("hidden_dim must be >= 2")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if not 0 <= self.eos_token < self.vocab_size:
            raise ConfigError("eos_token must be a valid token id")


@dataclass(frozen=True)
class ToyBaseModel:
    config: ToyModelConfig
    embedding: np.ndarray  # (V, d)
    layers: tuple  # L arrays of (d, d)
    projection: np.ndarray  # (d, V)

    @property
    def vocab_size(self):
        return self.config.vocab_size

    @property
    def hidden_dim(self):
        return self.config.hidden_dim

    @property
    def num_layers(self):
        return self.config.num_layers


@dataclass(frozen=True)
class FullAdapter:
    """One logical adapter: a LoraPair for every model layer."""

    id: int
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("adapter needs at least one layer")
        ranks = {p.rank for p in layers}
        dims = {p.dim for p in layers}
        if len(ranks) != 1 or len(dims) != 1:
            raise ShapeError("all layers of an adapter must share rank and dim")
        object.__setattr__(self, "layers", layers)

    @property
    def rank(self):
        return self.layers[0].rank

    @property
    def dim(self):
        return self.layers[0].dim

    def __eq__(self, other):
        if not isinstance(other, FullAdapter):
            return NotImplemented
        return (
            self.id == other.id
            and len(self.layers) == len(other.layers)
            and all(
                p.scale == q.scale
                and np.array_equal(p.a, q.a)
                and np.array_equal(p.b, q.b)
                for p, q in zip(self.layers, other.layers)
            )
        )

    __hash__ = None


@dataclass
class DecodeState:
    hidden: np.ndarray
    tokens_emitted: int = 0
    last_token: int | None = None


def build_model(config: ToyModelConfig) -> ToyBaseModel:
    """Draw all weights uniformly from ``[-1/sqrt(d), 1/sqrt(d)]``."""
    v, d = config.vocab_size, config.hidden_dim
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(d)
    embedding = rng.uniform(-bound, bound, size=(v, d))
    layers = tuple(rng.uniform(-bound, bound, size=(d, d)) for _ in range(config.num_layers))
    projection = rng.uniform(-bound, bound, size=(d, v))
    return ToyBaseModel(config, embedding, layers, projection)


def check_adapter(model: ToyBaseModel, adapter: FullAdapter):
    if len(adapter.layers) != model.num_layers or adapter.dim != model.hidden_dim:
        raise ShapeError(
            f"adapter {adapter.id} ({len(adapter.layers)} layers, d={adapter.dim}) "
            f"does not fit model (L={model.num_layers}, d={model.hidden_dim})"
        )


def greedy_tokens(model: ToyBaseModel, hidden):
    """Argmax of ``projection.T @ h`` per column; ties go to the lowest id."""
    logits = model.projection.T @ hidden
    return np.argmax(logits, axis=0)


def forward_token_batch(
    model: ToyBaseModel,
    adapters: Mapping[Hashable, FullAdapter],
    assignments: Sequence[Hashable],
    token_ids: Sequence[int],
):
    """Run one token per sample through every layer.

    Returns ``(hidden, next_tokens)`` where ``hidden`` has shape
    ``(batch, d)``. An assignment of ``None`` runs the base model only.
    """
    tokens = np.asarray(token_ids, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token_ids must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= model.vocab_size:
        raise ValueError(f"token id out of range [0, {model.vocab_size})")
    if len(assignments) != tokens.size:
        raise ShapeError("one assignment per token is required")

    h = model.embedding[tokens].T  # (d, batch)
    used = {a for a in assignments if a is not None}
    for layer_idx, w in enumerate(model.layers):
        pairs: dict[Hashable, LoraPair] = {
            a: adapters[a].layers[layer_idx] for a in used
        }
        h = np.tanh(batch_lora_forward(w, pairs, assignments, h))
    return h.T.copy(), greedy_tokens(model, h)


def process_prompt(model: ToyBaseModel, adapter: FullAdapter | None, prompt_tokens) -> DecodeState:
    """Feed the prompt one token at a time; one forward pass per token."""
    prompt = list(prompt_tokens)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    adapters, assign = _single(adapter)
    hidden = None
    for tok in prompt:
        hidden, _ = forward_token_batch(model, adapters, assign, [tok])
    return DecodeState(hidden=hidden[0], tokens_emitted=0, last_token=prompt[-1])


def decode_step(model: ToyBaseModel, adapter: FullAdapter | None, state: DecodeState):
    """Emit the greedy token for ``state`` and advance the hidden state past it."""
    token = int(greedy_tokens(model, state.hidden[:, None])[0])
    adapters, assign = _single(adapter)
    hidden, _ = forward_token_batch(model, adapters, assign, [token])
    return token, DecodeState(hidden=hidden[0], tokens_emitted=state.tokens_emitted + 1, last_token=token)


def generate(model, adapter, prompt_tokens, max_new_tokens):
    """Standalone greedy decode, stopping at ``max_new_tokens`` or EOS."""
    state = process_prompt(model, adapter, prompt_tokens)
    out = []
    while len(out) < max_new_tokens:
        tok, state = decode_step(model, adapter, state)
        out.append(tok)
        if tok == model.config.eos_token:
            break
    return out


def _single(adapter):
    if adapter is None:
        return {}, [None]
    return {adapter.id: adapter}, [adapter.id]
