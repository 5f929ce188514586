"""Cross-lingual transfer on synthetic data: does sharing help when the target is scarce?

Three languages walk the same 5-state grammar with disjoint 200-word
lexicons.  Each language in turn is the target, truncated to a small
threshold, while the other two keep their full training text.  The
multilingual model should beat the monolingual one when the target is
scarce, with the advantage shrinking as the target grows.
"""
from __future__ import annotations

from dataclasses import dataclass

from .sweep import SweepReport, SweepSettings, SweepSpec, run_sweep
from .synthetic import generate_corpora
from .train import TrainingConfig

LANGUAGES = ("xa", "xb", "xc")
THRESHOLDS = (2000, 5000, 10000, 20000)
SEEDS = (0, 1, 2)
VARIANTS = ("mono-awd", "multi-awd")
TRAIN_WORDS = 54000  # about 50K left for training after the validation split
TEST_WORDS = 4000
CORPUS_SEED = 11

# Desk schedule: anneal after two flat epochs and stop once lr falls below 1,
# so a run ends three anneals after its last improvement.
SETTINGS = SweepSettings(emb=64, hidden=128, train=TrainingConfig(max_epochs=60, patience=2, min_lr=1.0),
                         eval_batch_size=10)


def corpora():
    return generate_corpora(LANGUAGES, TRAIN_WORDS, TEST_WORDS, seed=CORPUS_SEED, n_types=200)


def spec(targets=LANGUAGES, thresholds=THRESHOLDS, seeds=SEEDS):
    return SweepSpec(LANGUAGES, VARIANTS, thresholds, seeds, targets)


def run(csv_path=None, log_dir=None, progress=None, resume=True, settings=SETTINGS, **spec_kw) -> SweepReport:
    return run_sweep(spec(**spec_kw), corpora(), settings, csv_path=csv_path, log_dir=log_dir,
                     resume=resume, progress=progress)


@dataclass
class TargetVerdict:
    language: str
    mono: dict   # threshold -> median test perplexity
    multi: dict
    low_wins: bool
    shrinks: bool

    @property
    def gaps(self):
        """Relative advantage of the multilingual model, (mono - multi) / mono."""
        return {t: (self.mono[t] - self.multi[t]) / self.mono[t] for t in self.mono}

    @property
    def ok(self):
        return self.low_wins and self.shrinks


def verdict(report: SweepReport, thresholds=THRESHOLDS):
    """Per target: multi below mono at the two lowest thresholds, and the
    relative gap at the largest threshold below both low-threshold gaps."""
    med = report.medians()
    out = []
    for lang in dict.fromkeys(r.language for r in report.rows):
        mono = {t: med[(lang, "mono-awd", str(t))] for t in thresholds}
        multi = {t: med[(lang, "multi-awd", str(t))] for t in thresholds}
        v = TargetVerdict(lang, mono, multi, False, False)
        low = thresholds[:2]
        v.low_wins = all(multi[t] < mono[t] for t in low)
        g = v.gaps
        v.shrinks = g[thresholds[-1]] < min(g[t] for t in low)
        out.append(v)
    return out
