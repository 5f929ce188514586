"""Three-layer LSTM language models with per-language tied embeddings.

:class:`MultilingualLM` assigns each LSTM layer to be shared across languages
or owned by each language.  :class:`MonolithicLM` is the plain single-language
model and exists as an independent reference for the ``M = 1`` case.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rnn import (
    ConfigError,
    DropoutMaskSet,
    LstmLayerParams,
    bernoulli_mask,
    embedding_row_mask,
    lstm_segment_forward,
    zero_state,
)

SHARED = "S"
PER_LANGUAGE = "P"
DEFAULT_PATTERN = (SHARED, SHARED, PER_LANGUAGE)
EMBED_INIT = 0.1


def parse_pattern(pattern) -> tuple:
    if isinstance(pattern, str):
        pattern = pattern.replace(",", " ").split()
        if len(pattern) == 1:
            pattern = list(pattern[0])
    pattern = tuple(str(p).upper()[:1] for p in pattern)
    if len(pattern) != 3 or any(p not in (SHARED, PER_LANGUAGE) for p in pattern):
        raise ConfigError(f"sharing pattern must have exactly 3 entries of S/P, got {pattern}")
    return pattern


@dataclass(frozen=True)
class ModelConfig:
    languages: tuple
    vocab_sizes: tuple
    emb: int = 512
    hidden: int = 1150
    pattern: tuple = DEFAULT_PATTERN

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        object.__setattr__(self, "pattern", parse_pattern(self.pattern))
        if not self.languages:
            raise ConfigError("need at least one language")
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError(f"duplicate language ids in {self.languages}")
        if len(self.vocab_sizes) != len(self.languages):
            raise ConfigError("one vocabulary size per language required")
        if self.emb <= 0 or self.hidden <= 0:
            raise ConfigError("emb and hidden must be positive")
        if any(v < 2 for v in self.vocab_sizes):
            raise ConfigError("every vocabulary needs at least 2 entries")

    @property
    def layer_dims(self):
        return [(self.emb, self.hidden), (self.hidden, self.hidden), (self.hidden, self.emb)]

    def vocab_size(self, language):
        return self.vocab_sizes[self.languages.index(language)]

    def config_hash(self) -> str:
        text = "|".join([
            ",".join(self.languages),
            ",".join(map(str, self.vocab_sizes)),
            str(self.emb), str(self.hidden), "".join(self.pattern),
        ])
        return hashlib.sha256(text.encode()).hexdigest()[:16]


class ForwardOutput(NamedTuple):
    logits: Tensor        # (B*T, V)
    raw_output: Tensor    # final LSTM layer output before output dropout, (B, T, emb)
    dropped_output: Tensor
    state: list


class MultilingualLM:
    def __init__(self, config: ModelConfig, rng):
        self.config = config
        self.embeddings = {}
        self.biases = {}
        for lang, V in zip(config.languages, config.vocab_sizes):
            self.embeddings[lang] = Tensor(rng.uniform(-EMBED_INIT, EMBED_INIT, size=(V, config.emb)),
                                           requires_grad=True, name=f"emb.{lang}")
            self.biases[lang] = Tensor(np.zeros(V), requires_grad=True, name=f"bias.{lang}")
        # layers[k][lang]; SHARED slots map every language to one object
        self.layers = []
        for k, ((din, dout), tag) in enumerate(zip(config.layer_dims, config.pattern)):
            if tag == SHARED:
                shared = LstmLayerParams.init(din, dout, rng, name=f"lstm{k}.shared")
                self.layers.append({lang: shared for lang in config.languages})
            else:
                self.layers.append({lang: LstmLayerParams.init(din, dout, rng, name=f"lstm{k}.{lang}")
                                    for lang in config.languages})
        self.parameter_count = sum(t.data.size for _, t in self.named_parameters())

    @property
    def languages(self):
        return self.config.languages

    def _check(self, language):
        if language not in self.embeddings:
            raise KeyError(f"unknown language {language!r}; model has {list(self.languages)}")

    def layers_for(self, language):
        self._check(language)
        return [slot[language] for slot in self.layers]

    def decoder_weight(self, language):
        # tied: the decoder projection is the embedding tensor itself
        return self.embeddings[language]

    def named_parameters(self):
        out = []
        for lang in self.languages:
            out.append((f"emb.{lang}", self.embeddings[lang]))
            out.append((f"bias.{lang}", self.biases[lang]))
        for k, (slot, tag) in enumerate(zip(self.layers, self.config.pattern)):
            owners = [("shared", slot[self.languages[0]])] if tag == SHARED else list(slot.items())
            for owner, p in owners:
                out.append((f"lstm{k}.{owner}.W", p.W))
                out.append((f"lstm{k}.{owner}.U", p.U))
                out.append((f"lstm{k}.{owner}.b", p.b))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameters_of(self, language):
        """``(shared, specific)`` parameter lists used by ``language``'s forward pass."""
        self._check(language)
        shared, specific = [], [self.embeddings[language], self.biases[language]]
        for slot, tag in zip(self.layers, self.config.pattern):
            (shared if tag == SHARED else specific).extend(slot[language].tensors())
        return shared, specific

    def init_state(self, language, batch_size):
        return zero_state(self.layers_for(language), batch_size)

    def forward(self, language, inputs, state, masks: DropoutMaskSet | None = None) -> ForwardOutput:
        self._check(language)
        inputs = np.asarray(inputs)
        B, T = inputs.shape
        E = self.embeddings[language]
        x = embed(E, inputs, None if masks is None else masks.embedding)
        raw, new_state = lstm_segment_forward(self.layers_for(language), x, state, masks)
        dropped = raw if masks is None or masks.output is None else ag.mask_apply(raw, _time_mask(masks.output))
        flat = ag.reshape(dropped, (B * T, self.config.emb))
        logits = ag.add_bias(ag.matmul(flat, ag.transpose(E)), self.biases[language])
        return ForwardOutput(logits, raw, dropped, new_state)


class MonolithicLM:
    """Single-language 3-layer LSTM LM without any sharing bookkeeping."""

    def __init__(self, config: ModelConfig, rng):
        if len(config.languages) != 1:
            raise ConfigError("MonolithicLM takes exactly one language")
        self.config = config
        self.language = config.languages[0]
        V = config.vocab_sizes[0]
        self.embedding = Tensor(rng.uniform(-EMBED_INIT, EMBED_INIT, size=(V, config.emb)), requires_grad=True, name="emb")
        self.bias = Tensor(np.zeros(V), requires_grad=True, name="bias")
        self.rnns = [LstmLayerParams.init(din, dout, rng, name=f"lstm{k}") for k, (din, dout) in enumerate(config.layer_dims)]
        self.parameter_count = sum(t.data.size for _, t in self.named_parameters())

    @property
    def languages(self):
        return self.config.languages

    def layers_for(self, language):
        if language != self.language:
            raise KeyError(f"unknown language {language!r}")
        return self.rnns

    def named_parameters(self):
        out = [("emb", self.embedding), ("bias", self.bias)]
        for k, p in enumerate(self.rnns):
            out += [(f"lstm{k}.W", p.W), (f"lstm{k}.U", p.U), (f"lstm{k}.b", p.b)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameters_of(self, language):
        self.layers_for(language)
        return [], self.parameters()

    def init_state(self, language, batch_size):
        return zero_state(self.layers_for(language), batch_size)

    def forward(self, language, inputs, state, masks=None) -> ForwardOutput:
        self.layers_for(language)
        B, T = np.shape(inputs)
        h = embed(self.embedding, inputs, None if masks is None else masks.embedding)
        new_state = []
        for k, layer in enumerate(self.rnns):
            if masks is not None and masks.layer_inputs[k] is not None:
                h = ag.mask_apply(h, _time_mask(masks.layer_inputs[k]))
            U = layer.U
            if masks is not None and masks.weight_drop[k] is not None:
                U = ag.mask_apply(U, masks.weight_drop[k])
            h, hT, cT = ag.lstm(h, layer.W, U, layer.b, *state[k])
            new_state.append((hT, cT))
        raw = h
        if masks is not None and masks.output is not None:
            h = ag.mask_apply(h, _time_mask(masks.output))
        logits = ag.add_bias(ag.matmul(ag.reshape(h, (B * T, self.config.emb)), ag.transpose(self.embedding)), self.bias)
        return ForwardOutput(logits, raw, h, new_state)


def _time_mask(mask):
    return mask[:, None, :] if mask.ndim == 2 else mask


def build_model(config: ModelConfig, rng):
    return MultilingualLM(config, rng)


def forward_language(model, language, inputs, state, masks=None):
    """Per-language forward pass returning ``(logits (B, T, V), new_state)``."""
    out = model.forward(language, inputs, state, masks)
    B, T = np.shape(inputs)
    return ag.reshape(out.logits, (B, T, out.logits.shape[1])), out.state


def parameters_of(model, language):
    return model.parameters_of(language)


@dataclass(frozen=True)
class DropoutRates:
    input: float = 0.65
    output: float = 0.4
    hidden: float = 0.3
    embedding: float = 0.1
    weight: float = 0.5
    locked: bool = True  # False: plain per-element input/output dropout
    embedding_per_row: bool = False  # True: each batch row drops its own word types


def embed(table: Tensor, inputs, mask=None) -> Tensor:
    """Look up ``inputs`` in ``table`` under a word-type dropout mask.

    A ``(V, 1)`` mask drops the same types for the whole segment; a
    ``(B, V, 1)`` mask drops types independently in each batch row.
    """
    if mask is None:
        return ag.embedding(table, inputs)
    if mask.ndim == 2:
        return ag.embedding(ag.mask_apply(table, mask), inputs)
    inputs = np.asarray(inputs)
    x = ag.embedding(table, inputs)
    return ag.mask_apply(x, mask[np.arange(inputs.shape[0])[:, None], inputs])


def sample_masks(model, language, batch_size, seq_len, rates: DropoutRates, rng) -> DropoutMaskSet:
    """Draw one language's masks for one segment, in a fixed order."""
    layers = model.layers_for(language)
    V = model.config.vocab_size(language)
    emb = model.config.emb
    ms = DropoutMaskSet()
    if rates.embedding > 0:
        rows = batch_size if rates.embedding_per_row else None
        ms.embedding = embedding_row_mask(V, rates.embedding, rng, rows)

    def io_mask(width, p):
        if p == 0:
            return None
        if rates.locked:
            return bernoulli_mask((batch_size, 1, width), p, rng)
        return bernoulli_mask((batch_size, seq_len, width), p, rng)

    ms.layer_inputs = [io_mask(emb, rates.input)]
    for layer in layers[:-1]:
        p = rates.hidden
        ms.layer_inputs.append(None if p == 0 else bernoulli_mask((batch_size, 1, layer.hidden_size), p, rng))
    ms.output = io_mask(emb, rates.output)
    ms.weight_drop = [None if rates.weight == 0 else bernoulli_mask(layer.U.shape, rates.weight, rng) for layer in layers]
    return ms
