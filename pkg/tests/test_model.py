import numpy as np
import pytest

from multilm import autograd as ag
from multilm.model import (
    DEFAULT_PATTERN,
    DropoutRates,
    ModelConfig,
    MonolithicLM,
    MultilingualLM,
    build_model,
    forward_language,
    parameters_of,
    parse_pattern,
    sample_masks,
)
from multilm.rnn import ConfigError


def _model(langs=("aa", "bb"), vocab=(7, 9), emb=4, hidden=6, pattern=DEFAULT_PATTERN, seed=0):
    return build_model(ModelConfig(langs, vocab, emb, hidden, pattern), np.random.default_rng(seed))


def test_full_size_layer_dims():
    cfg = ModelConfig(("x",), (10,))
    assert cfg.layer_dims == [(512, 1150), (1150, 1150), (1150, 512)]


def test_pattern_counts():
    m = _model(emb=16, hidden=32)
    names = [n for n, _ in m.named_parameters()]
    assert sum(n.startswith("lstm") and n.endswith(".W") for n in names) == 4
    assert {"lstm0.shared.W", "lstm1.shared.W", "lstm2.aa.W", "lstm2.bb.W"} <= set(names)
    assert sum(n.startswith("emb.") for n in names) == 2


def test_bad_pattern():
    with pytest.raises(ConfigError):
        parse_pattern("S,S")
    with pytest.raises(ConfigError):
        parse_pattern(["S", "X", "P"])
    assert parse_pattern("shared per shared") == ("S", "P", "S")


@pytest.mark.parametrize("pattern", ["SSS", "SSP", "PSP", "PPP"])
def test_single_language_parameter_count_matches_monolithic(pattern):
    cfg = ModelConfig(("aa",), (11,), 5, 7, tuple(pattern))
    assert MultilingualLM(cfg, np.random.default_rng(0)).parameter_count == \
        MonolithicLM(cfg, np.random.default_rng(0)).parameter_count


def test_logits_shape():
    m = _model(vocab=(7, 9))
    logits, state = forward_language(m, "aa", np.zeros((2, 3), dtype=int), m.init_state("aa", 2))
    assert logits.shape == (2, 3, 7)
    assert [h.shape for h, _ in state] == [(2, 6), (2, 6), (2, 4)]


def test_unknown_language():
    m = _model()
    with pytest.raises(KeyError):
        m.forward("zz", np.zeros((1, 1), dtype=int), None)


def test_tying_is_identity():
    m = _model()
    for lang in m.languages:
        assert m.decoder_weight(lang) is m.embeddings[lang]


def test_tying_survives_updates():
    from multilm.train import TrainingConfig, joint_step, sgd_update
    m = _model()
    rng = np.random.default_rng(1)
    segs = {l: (rng.integers(0, m.config.vocab_size(l), (2, 3)), rng.integers(0, m.config.vocab_size(l), (2, 3)))
            for l in m.languages}
    states = {l: m.init_state(l, 2) for l in m.languages}
    before = {l: m.embeddings[l] for l in m.languages}
    for _ in range(3):
        res = joint_step(m, segs, states, None, TrainingConfig())
        ag.backward(res.loss)
        sgd_update(m.parameters(), 0.5)
        for p in m.parameters():
            p.zero_grad()
    for l in m.languages:
        assert m.decoder_weight(l) is before[l] is m.embeddings[l]


def test_other_language_embedding_does_not_affect_logits():
    m = _model()
    x = np.array([[1, 2, 3]])
    with ag.no_grad():
        a = m.forward("aa", x, m.init_state("aa", 1)).logits.data
    m.embeddings["bb"].assign_(m.embeddings["bb"].data + 5.0)
    with ag.no_grad():
        b = m.forward("aa", x, m.init_state("aa", 1)).logits.data
    assert np.array_equal(a, b)


def test_language_isolation_of_updates():
    m = _model(langs=("aa", "bb", "cc"), vocab=(5, 6, 7))
    snapshot = {n: p.data.copy() for n, p in m.named_parameters()}
    x = np.array([[1, 2, 3, 4]])
    out = m.forward("bb", x, m.init_state("bb", 1))
    loss = ag.softmax_cross_entropy(out.logits, x.ravel())
    ag.backward(loss)
    shared, specific = m.parameters_of("bb")
    touched = {id(p) for p in shared + specific}
    for n, p in m.named_parameters():
        if p.grad is not None:
            p.sub_(0.1 * p.grad)
        if id(p) not in touched:
            assert np.array_equal(p.data, snapshot[n]), n
            assert p.grad is None


def test_parameters_of_partition():
    m = _model(langs=("aa", "bb", "cc"), vocab=(5, 6, 7))
    shared, specific = parameters_of(m, "aa")
    names = {id(p): n for n, p in m.named_parameters()}
    assert sorted(names[id(p)] for p in shared) == sorted(
        f"lstm{k}.shared.{w}" for k in (0, 1) for w in "WUb")
    assert sorted(names[id(p)] for p in specific) == sorted(
        ["emb.aa", "bias.aa"] + [f"lstm2.aa.{w}" for w in "WUb"])
    _, spec_b = parameters_of(m, "bb")
    assert not {id(p) for p in specific} & {id(p) for p in spec_b}
    ppp = _model(pattern="PPP")
    assert parameters_of(ppp, "aa")[0] == []


def test_single_language_forward_is_bitwise_monolithic():
    cfg = ModelConfig(("aa",), (13,), 6, 8, "PPP")
    multi = MultilingualLM(cfg, np.random.default_rng(3))
    mono = MonolithicLM(cfg, np.random.default_rng(3))
    for (_, a), (_, b) in zip(multi.named_parameters(), mono.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    x = np.random.default_rng(4).integers(0, 13, size=(3, 5))
    ma = sample_masks(multi, "aa", 3, 5, DropoutRates(), np.random.default_rng(9))
    mb = sample_masks(mono, "aa", 3, 5, DropoutRates(), np.random.default_rng(9))
    oa = multi.forward("aa", x, multi.init_state("aa", 3), ma)
    ob = mono.forward("aa", x, mono.init_state("aa", 3), mb)
    assert oa.logits.data.tobytes() == ob.logits.data.tobytes()


def test_masks_follow_rates():
    m = _model()
    rng = np.random.default_rng(0)
    ms = sample_masks(m, "aa", 2, 5, DropoutRates(), rng)
    assert ms.embedding.shape == (7, 1)
    assert [x.shape for x in ms.layer_inputs] == [(2, 1, 4), (2, 1, 6), (2, 1, 6)]
    assert ms.output.shape == (2, 1, 4)
    assert [w.shape for w in ms.weight_drop] == [(24, 6), (24, 6), (16, 4)]
    plain = sample_masks(m, "aa", 2, 5, DropoutRates(hidden=0, embedding=0, weight=0, locked=False), rng)
    assert plain.embedding is None and plain.weight_drop == [None] * 3
    assert plain.layer_inputs[0].shape == (2, 5, 4) and plain.layer_inputs[1] is None


def test_forward_finite_over_many_random_steps():
    m = _model(langs=("aa", "bb"), vocab=(30, 40), emb=8, hidden=12)
    rng = np.random.default_rng(2)
    with ag.no_grad():
        for i in range(2000):
            lang = m.languages[i % 2]
            V = m.config.vocab_size(lang)
            out = m.forward(lang, rng.integers(0, V, size=(1, 5)), m.init_state(lang, 1),
                            sample_masks(m, lang, 1, 5, DropoutRates(), rng))
            assert np.isfinite(out.logits.data).all()


def test_config_hash_changes_with_shape():
    a = ModelConfig(("aa",), (10,), 4, 6)
    assert a.config_hash() == ModelConfig(("aa",), (10,), 4, 6).config_hash()
    assert a.config_hash() != ModelConfig(("aa",), (11,), 4, 6).config_hash()


def test_per_row_embedding_dropout():
    from multilm.model import embed
    rng = np.random.default_rng(0)
    table = ag.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    mask = np.ones((2, 5, 1)) / 0.9
    mask[0, 3] = 0.0
    idx = np.array([[3, 1, 3], [3, 3, 0]])
    out = embed(table, idx, mask)
    assert np.all(out.data[0, [0, 2]] == 0)
    assert np.allclose(out.data[1, :2], table.data[3] / 0.9)
    assert ag.finite_difference_check(lambda: ag.sum(ag.square(embed(table, idx, mask))), [table]) < 1e-6
    m = _model()
    ms = sample_masks(m, "aa", 2, 5, DropoutRates(embedding_per_row=True), rng)
    assert ms.embedding.shape == (2, 7, 1)
    from multilm.train import TrainingConfig
    assert TrainingConfig(embedding_dropout_per_row=True).rates.embedding_per_row
