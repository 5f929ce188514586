"""LSTM layers plus the weight-drop, variational and embedding dropout regularizers.

All dropout here is inverted: kept entries are scaled by ``1/(1-p)`` at train
time so evaluation needs no rescaling.  Masks are sampled up front (once per
segment) and handed to the graph as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

GATES = ("input", "forget", "cell", "output")


class ConfigError(ValueError):
    pass


def _check_rate(p, what="dropout"):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"{what} rate must lie in [0, 1), got {p}")


@dataclass
class LstmLayerParams:
    W: Tensor  # (4H_out, H_in)
    U: Tensor  # (4H_out, H_out)
    b: Tensor  # (4H_out,)

    @property
    def input_size(self):
        return self.W.shape[1]

    @property
    def hidden_size(self):
        return self.U.shape[1]

    def tensors(self):
        return [self.W, self.U, self.b]

    @classmethod
    def init(cls, input_size, hidden_size, rng, name=""):
        """Uniform(+-1/sqrt(H)) weights, forget-gate bias 1, other biases 0."""
        bound = 1.0 / np.sqrt(hidden_size)
        W = rng.uniform(-bound, bound, size=(4 * hidden_size, input_size))
        U = rng.uniform(-bound, bound, size=(4 * hidden_size, hidden_size))
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = 1.0
        return cls(
            Tensor(W, requires_grad=True, name=name + ".W"),
            Tensor(U, requires_grad=True, name=name + ".U"),
            Tensor(b, requires_grad=True, name=name + ".b"),
        )


@dataclass
class DropoutMaskSet:
    """Masks for one language's forward pass over one segment.

    ``layer_inputs[k]`` multiplies the input of LSTM layer ``k`` and ``output``
    the final layer's output; both are ``(B, 1, H)`` for variational (locked)
    dropout or ``(B, T, H)`` for plain per-element dropout.  ``embedding`` is a
    ``(V, 1)`` row mask and ``weight_drop[k]`` has the shape of layer ``k``'s U.
    Any entry may be None, meaning "not applied".
    """
    embedding: np.ndarray | None = None
    layer_inputs: list = field(default_factory=lambda: [None, None, None])
    output: np.ndarray | None = None
    weight_drop: list = field(default_factory=lambda: [None, None, None])


def bernoulli_mask(shape, p, rng):
    """Entries 0 with probability p, else 1/(1-p)."""
    _check_rate(p)
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def sample_variational_mask(shape, p, rng):
    """A single ``(B, H)`` mask meant to be reused at every timestep."""
    B, H = shape
    return bernoulli_mask((B, H), p, rng)


def weight_drop_mask(shape, p, rng):
    return bernoulli_mask(shape, p, rng)


def apply_weight_drop(U: Tensor, p, rng=None, training=True, mask=None) -> Tensor:
    """DropConnect on a hidden-to-hidden matrix; identity in evaluation mode."""
    _check_rate(p, "weight-drop")
    if not training or (p == 0.0 and mask is None):
        return U
    if mask is None:
        mask = weight_drop_mask(U.shape, p, rng)
    return ag.mask_apply(U, mask)


def embedding_row_mask(vocab_size, p, rng, batch_size=None):
    """Word-type keep mask, ``(V, 1)`` or one per batch row ``(B, V, 1)``."""
    shape = (vocab_size, 1) if batch_size is None else (batch_size, vocab_size, 1)
    return bernoulli_mask(shape, p, rng)


def embed_with_dropout(table: Tensor, indices, p_e=0.0, rng=None, training=True, mask=None) -> Tensor:
    """Embedding lookup where whole word rows are dropped for the segment."""
    _check_rate(p_e, "embedding dropout")
    indices = np.asarray(indices)
    V = table.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= V):
        raise IndexError(f"token index out of range for vocabulary of size {V}")
    if training and (p_e > 0.0 or mask is not None):
        if mask is None:
            mask = embedding_row_mask(V, p_e, rng)
        table = ag.mask_apply(table, mask)
    return ag.embedding(table, indices)


def lstm_layer_forward(params: LstmLayerParams, x: Tensor, state, input_mask=None, weight_mask=None):
    """One LSTM layer over a segment with its (optional) regularization masks.

    The input mask, if given as ``(B, H)``, is broadcast over time so the same
    mask object multiplies every timestep.
    """
    if input_mask is not None:
        if input_mask.ndim == 2:
            input_mask = input_mask[:, None, :]
        x = ag.mask_apply(x, input_mask)
    U = params.U if weight_mask is None else ag.mask_apply(params.U, weight_mask)
    h0, c0 = state
    return ag.lstm(x, params.W, U, params.b, h0, c0)


def lstm_segment_forward(layers, inputs: Tensor, state, masks: DropoutMaskSet | None = None):
    """Run a stack of LSTM layers over a ``(B, T, H_in)`` segment.

    ``state`` is a list of ``(h, c)`` pairs, one per layer.  Returns the last
    layer's ``(B, T, H_out)`` outputs and the detached final states.
    """
    B = inputs.shape[0]
    if len(state) != len(layers):
        raise ag.DimensionError(f"lstm_segment_forward: {len(state)} states for {len(layers)} layers")
    x = inputs
    new_state = []
    for k, (params, (h0, c0)) in enumerate(zip(layers, state)):
        if np.shape(h0) != (B, params.hidden_size):
            raise ag.DimensionError(
                f"lstm_segment_forward: layer {k} state {np.shape(h0)} vs expected {(B, params.hidden_size)}")
        in_mask = masks.layer_inputs[k] if masks is not None else None
        w_mask = masks.weight_drop[k] if masks is not None else None
        x, h, c = lstm_layer_forward(params, x, (h0, c0), in_mask, w_mask)
        new_state.append((h, c))
    return x, new_state


def zero_state(layers, batch_size):
    return [(np.zeros((batch_size, p.hidden_size)), np.zeros((batch_size, p.hidden_size))) for p in layers]


def lstm_cell_reference(params: LstmLayerParams, x: Tensor, h: Tensor, c: Tensor):
    """One LSTM step spelled out with primitive ops (x: (B, H_in), h/c: (B, H))."""
    H = params.hidden_size
    bias = ag.add_bias(ag.add(ag.matmul(x, ag.transpose(params.W)), ag.matmul(h, ag.transpose(params.U))), params.b)
    i = ag.sigmoid(ag.slice(bias, 0, H))
    f = ag.sigmoid(ag.slice(bias, H, 2 * H))
    g = ag.tanh(ag.slice(bias, 2 * H, 3 * H))
    o = ag.sigmoid(ag.slice(bias, 3 * H, 4 * H))
    c_new = ag.add(ag.hadamard(f, c), ag.hadamard(i, g))
    h_new = ag.hadamard(o, ag.tanh(c_new))
    return h_new, c_new
