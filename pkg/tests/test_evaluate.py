import math

import numpy as np
import pytest

from multilm import autograd as ag
from multilm.evaluate import eval_batches, perplexity, total_nll
from multilm.model import ModelConfig, build_model


def _model(V=10, seed=0, emb=4, hidden=6):
    return build_model(ModelConfig(("aa",), (V,), emb, hidden), np.random.default_rng(seed))


def _uniform_model(V):
    m = _model(V)
    # zero embeddings make every decoder logit equal to its bias; zero bias makes them equal
    with ag.no_grad():
        m.embeddings["aa"].assign_(np.zeros(m.embeddings["aa"].shape))
        m.biases["aa"].assign_(np.zeros(V))
    return m


def test_uniform_model_perplexity_is_vocab_size():
    for V in (10, 37):
        stream = np.random.default_rng(V).integers(0, V, 333)
        for B in (1, 3):
            assert abs(perplexity(_uniform_model(V), "aa", stream, B, 70) - V) < 1e-9


def test_perplexity_matches_dumped_logits():
    m = _model(V=12, seed=3)
    stream = np.random.default_rng(1).integers(0, 12, 500)
    dump = []
    ppl = perplexity(m, "aa", stream, 4, 30, dump=dump)
    # independent recomputation from the dumped logits
    nll = []
    for logits, targets in dump:
        for row, t in zip(logits, targets):
            row = row.astype(np.float64)
            m_ = max(row)
            nll.append(m_ + math.log(sum(math.exp(v - m_) for v in row)) - row[t])
    assert abs(math.exp(sum(nll) / len(nll)) - ppl) < 1e-9
    assert len(nll) == 500


def test_every_token_is_scored_from_eos_context():
    x, y = eval_batches(np.array([5, 6, 7, 8, 9, 4]), 2, context_index=0)
    assert x.tolist() == [[0, 5, 6], [7, 8, 9]]
    assert y.tolist() == [[5, 6, 7], [8, 9, 4]]
    x, y = eval_batches(np.arange(1, 8), 3, context_index=0)
    assert y.size == 6  # trailing 7 mod 3 token not scored


def test_empty_stream_rejected():
    with pytest.raises(ValueError, match="empty"):
        perplexity(_model(), "aa", np.array([], dtype=int))
    with pytest.raises(ValueError, match="shorter"):
        perplexity(_model(), "aa", np.array([1, 2]), batch_size=3)


def test_rows_decompose_exactly():
    # a batch of B rows scores the same as evaluating each row alone with its own context
    m = _model(V=9, seed=5)
    stream = np.random.default_rng(2).integers(1, 9, 240)
    B = 4
    total, count = total_nll(m, "aa", stream, B, 25)
    L = len(stream) // B
    parts = 0.0
    for r in range(B):
        ctx = 0 if r == 0 else int(stream[r * L - 1])
        row = stream[r * L:(r + 1) * L]
        s, n = total_nll(m, "aa", row, 1, 25, context_index=ctx)
        parts += s
    assert count == B * L
    assert parts == pytest.approx(total, rel=1e-12)


def test_batch_size_one_reference_and_chunking_invariance():
    m = _model(V=9, seed=6)
    stream = np.random.default_rng(3).integers(0, 9, 210)
    ref = perplexity(m, "aa", stream, 1, 70)
    assert perplexity(m, "aa", stream, 1, 13) == pytest.approx(ref, rel=1e-12)
    # 210 = 3 * 70, so B=3 scores every token; rows start from other contexts
    assert abs(perplexity(m, "aa", stream, 3, 70) / ref - 1) < 0.05


def test_evaluation_does_not_touch_parameters():
    m = _model()
    before = [p.data.tobytes() for p in m.parameters()]
    perplexity(m, "aa", np.arange(10).repeat(5), 2, 7)
    assert [p.data.tobytes() for p in m.parameters()] == before
    assert not ag.pending_graph()
