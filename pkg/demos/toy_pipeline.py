"""Prepare the bundled toy corpora, train a small multilingual model, evaluate it.

    python3 demos/toy_pipeline.py --epochs 3

The three toy languages share one grammar but no words.  Training all three
jointly with the middle layers shared is the default multilingual set-up.
"""
import argparse
import time

import numpy as np

from multilm.cli import toy_corpus_dir
from multilm.corpus import format_counts_table, prepare_pack, read_corpus
from multilm.evaluate import perplexity
from multilm.train import Trainer, TrainingConfig, build_for_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--emb", type=int, default=32)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = toy_corpus_dir()
    langs = ("xa", "xb", "xc")
    packs = {l: prepare_pack(l, read_corpus(root / f"{l}.train.txt"), read_corpus(root / f"{l}.test.txt"))
             for l in langs}
    print(format_counts_table(packs.values()))
    print("vocabulary sizes:", {l: len(p.vocab) for l, p in packs.items()})

    cfg = TrainingConfig(max_epochs=args.epochs, seed=args.seed)
    model, cfg, rngs = build_for_variant("multi-awd", langs, [len(packs[l].vocab) for l in langs],
                                         args.emb, args.hidden, cfg)
    print(f"\n{model.parameter_count} parameters, sharing pattern {''.join(model.config.pattern)}")
    tr = Trainer(model, {l: packs[l].train for l in langs}, cfg,
                 valid_streams={l: packs[l].valid for l in langs},
                 eos={l: packs[l].vocab.eos_index for l in langs}, rngs=rngs)
    t0 = time.perf_counter()
    result = tr.fit(log_line=print)
    print(f"trained {result.epochs_run} epochs in {time.perf_counter() - t0:.0f}s, best epoch {result.best_epoch}")

    # a unigram model is the natural floor an untrained LM has to beat
    for l in langs:
        p = packs[l]
        ppl = perplexity(model, l, p.test, cfg.eval_batch_size, cfg.bptt, p.vocab.eos_index)
        freq = np.bincount(p.train, minlength=len(p.vocab)) + 1.0
        unigram = float(np.exp(-np.mean(np.log(freq[p.test] / freq.sum()))))
        print(f"{l}: test perplexity {ppl:.2f} (unigram {unigram:.2f})")


if __name__ == "__main__":
    main()
