"""Synthetic multilingual corpora from one shared hidden-state grammar.

Every language walks the same state-transition chain but emits words from its
own disjoint lexicon, so sentence structure is shared while surface forms are
not.  Used for the bundled toy corpora and for the transfer experiments.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ONSETS = {
    0: "ptkmnls",
    1: "bdgrwyz",
    2: "fhjvcqx",
}
VOWELS = "aeiou"


@dataclass
class Grammar:
    transitions: np.ndarray  # (S, S) next-state probabilities given not ending
    start: np.ndarray        # (S,)
    stop: np.ndarray         # (S,) probability the sentence ends after this state

    @property
    def n_states(self):
        return len(self.start)

    @classmethod
    def random(cls, n_states=5, seed=2019, concentration=0.3, mean_stop=0.12):
        rng = np.random.default_rng(seed)
        T = rng.dirichlet(np.full(n_states, concentration), size=n_states)
        start = rng.dirichlet(np.ones(n_states))
        stop = np.clip(rng.uniform(0.5, 1.5, n_states) * mean_stop, 0.02, 0.5)
        return cls(T, start, stop)


def make_lexicon(language_index, n_types, rng, taken=None):
    """``n_types`` distinct pseudo-words built from a language-specific syllable set."""
    onsets = ONSETS[language_index % len(ONSETS)]
    taken = set() if taken is None else taken
    words = []
    while len(words) < n_types:
        n_syl = rng.integers(1, 4)
        w = "".join(onsets[rng.integers(len(onsets))] + VOWELS[rng.integers(len(VOWELS))] for _ in range(n_syl))
        if language_index >= len(ONSETS):
            w = w + str(language_index)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class SyntheticLanguage:
    name: str
    grammar: Grammar
    emissions: list  # per state: (words, probabilities)

    def sentence(self, rng):
        g = self.grammar
        s = rng.choice(g.n_states, p=g.start)
        out = []
        while True:
            words, probs = self.emissions[s]
            out.append(words[rng.choice(len(words), p=probs)])
            if rng.random() < g.stop[s] or len(out) >= 60:
                return out
            s = rng.choice(g.n_states, p=g.transitions[s])

    def corpus(self, n_words, rng):
        """Sentences until at least ``n_words`` words have been produced."""
        sents, n = [], 0
        while n < n_words:
            s = self.sentence(rng)
            sents.append(s)
            n += len(s)
        return sents


def make_languages(names, grammar=None, n_types=200, zipf=1.0, overlap=0.0, seed=7):
    """Languages sharing ``grammar`` with disjoint lexicons.

    Each state owns an even share of the lexicon with Zipfian weights.  With
    ``overlap > 0`` that much of every state's emission mass is spread over the
    whole lexicon instead, so a word no longer identifies its state.
    """
    grammar = grammar or Grammar.random()
    rng = np.random.default_rng(seed)
    taken = set()
    langs = []
    S = grammar.n_states
    for i, name in enumerate(names):
        lex = make_lexicon(i, n_types, rng, taken)
        order = rng.permutation(n_types)
        emissions = []
        for s in range(S):
            own = np.zeros(n_types)
            idx = order[s::S]
            w = 1.0 / np.arange(1, len(idx) + 1) ** zipf
            own[idx] = w / w.sum()
            if overlap > 0:
                own = (1 - overlap) * own + overlap * rng.dirichlet(np.full(n_types, 0.5))
            keep = np.flatnonzero(own)
            emissions.append(([lex[j] for j in keep], own[keep] / own[keep].sum()))
        langs.append(SyntheticLanguage(name, grammar, emissions))
    return langs


def generate_corpora(names, train_words, test_words, seed=11, **kw):
    """``{name: (train_sentences, test_sentences)}`` drawn independently per language."""
    langs = make_languages(names, **kw)
    out = {}
    for i, lang in enumerate(langs):
        rng = np.random.default_rng([seed, i])
        out[lang.name] = (lang.corpus(train_words, rng), lang.corpus(test_words, rng))
    return out


def write_corpora(corpora, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, (train, test) in corpora.items():
        for split, sents in (("train", train), ("test", test)):
            with open(d / f"{name}.{split}.txt", "w", encoding="utf-8") as f:
                for s in sents:
                    f.write(" ".join(s) + "\n")
