"""What each sharing pattern costs in parameters, and what an update touches.

    python3 demos/sharing_patterns.py --languages 3

A pattern assigns each of the three LSTM layers to S (one copy for all
languages) or P (one copy per language).  Embeddings and decoders are
always per language and tied to each other.
"""
import argparse

import numpy as np

from multilm import autograd as ag
from multilm.model import ModelConfig, build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--languages", type=int, default=3)
    ap.add_argument("--vocab", type=int, default=150)
    ap.add_argument("--emb", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=128)
    args = ap.parse_args()
    langs = tuple(f"l{i}" for i in range(args.languages))
    vocab = (args.vocab,) * args.languages

    print(f"{'pattern':8} {'parameters':>11} {'per language':>13}")
    for pattern in ("PPP", "SPP", "SSP", "PSP", "SSS"):
        m = build_model(ModelConfig(langs, vocab, args.emb, args.hidden, pattern), np.random.default_rng(0))
        shared, specific = m.parameters_of(langs[0])
        own = sum(p.data.size for p in specific)
        print(f"{pattern:8} {m.parameter_count:11d} {own:13d}")

    # one backward pass for language 0 leaves every other language's own weights untouched
    m = build_model(ModelConfig(langs, vocab, args.emb, args.hidden, "SSP"), np.random.default_rng(0))
    x = np.random.default_rng(1).integers(0, args.vocab, (2, 10))
    out = m.forward(langs[0], x, m.init_state(langs[0], 2))
    ag.backward(ag.softmax_cross_entropy(out.logits, x.ravel()))
    touched = [n for n, p in m.named_parameters() if p.grad is not None]
    print("\ngradients after a", langs[0], "step:", ", ".join(touched))


if __name__ == "__main__":
    main()
