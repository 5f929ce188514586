"""Perplexity of a trained model on a held-out index stream."""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag


def eval_batches(stream, batch_size, context_index):
    """Inputs/targets ``(B, L)`` predicting every token of ``stream``.

    The first token is predicted from ``context_index`` (end of sentence), each
    later token from its predecessor.  Rows are contiguous slices; the trailing
    ``len(stream) mod B`` tokens are not scored.
    """
    stream = np.asarray(stream, dtype=np.int64)
    if len(stream) == 0:
        raise ValueError("cannot evaluate an empty stream")
    inputs = np.concatenate([[context_index], stream[:-1]])
    L = len(stream) // batch_size
    if L == 0:
        raise ValueError(f"stream of {len(stream)} tokens shorter than batch size {batch_size}")
    n = L * batch_size
    return inputs[:n].reshape(batch_size, L), stream[:n].reshape(batch_size, L)


def total_nll(model, language, stream, batch_size=1, bptt=70, context_index=None, dump=None):
    """Summed negative log-likelihood and number of scored tokens (evaluation mode)."""
    if context_index is None:
        context_index = 0
    inputs, targets = eval_batches(stream, batch_size, context_index)
    total = 0.0
    count = 0
    with ag.no_grad():
        state = model.init_state(language, batch_size)
        L = inputs.shape[1]
        for start in range(0, L, bptt):
            x = inputs[:, start:start + bptt]
            y = targets[:, start:start + bptt]
            out = model.forward(language, x, state, None)
            state = out.state
            logits = out.logits.data
            if dump is not None:
                dump.append((logits.copy(), y.ravel().copy()))
            shifted = logits - logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1))
            nll = lse - shifted[np.arange(len(lse)), y.ravel()]
            total += float(nll.sum())
            count += nll.size
    return total, count


def perplexity(model, language, stream, batch_size=1, bptt=70, context_index=None, dump=None) -> float:
    """``exp`` of the mean per-token NLL with hidden state carried along each row.

    ``dump``, if a list, receives ``(logits, targets)`` per chunk.
    """
    total, count = total_nll(model, language, stream, batch_size, bptt, context_index, dump)
    return math.exp(total / count)
