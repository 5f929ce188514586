"""Data-scarcity sweep: train every (target, variant, threshold, seed) cell and report.

A cell truncates only its target language.  Monolingual variants train on the
target alone; the multilingual variant trains the target together with every
other language at full size.  Rows stream into a CSV as cells finish so an
interrupted sweep can be resumed.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FULL, prepare_pack, threshold_label
from .evaluate import perplexity
from .rnn import ConfigError
from .train import VARIANTS, Trainer, TrainingAborted, TrainingConfig, build_for_variant, variant_config

log = logging.getLogger(__name__)

DESK_THRESHOLDS = (5000, 10000, 20000, 40000, 80000)
FULL_SIZE_THRESHOLDS = (20000,) + tuple(range(40000, 240001, 20000)) + (300000, 340000, 400000, FULL)
CSV_FIELDS = ("language", "variant", "threshold", "seed", "test_ppl", "valid_ppl", "epochs", "seconds")


def _threshold_key(t):
    return math.inf if t == FULL else int(t)


@dataclass(frozen=True)
class SweepSpec:
    languages: tuple
    variants: tuple = VARIANTS
    thresholds: tuple = DESK_THRESHOLDS
    seeds: tuple = (0, 1, 2)
    targets: tuple | None = None  # languages whose training text is truncated; default all

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "thresholds", tuple(self.thresholds))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        targets = self.languages if self.targets is None else tuple(self.targets)
        object.__setattr__(self, "targets", targets)
        if not self.languages:
            raise ConfigError("sweep needs at least one language")
        unknown = [t for t in targets if t not in self.languages]
        if unknown:
            raise ConfigError(f"target {unknown[0]!r} is not among the sweep languages")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        keys = [_threshold_key(t) for t in self.thresholds]
        if not keys or any(b <= a for a, b in zip(keys, keys[1:])):
            raise ConfigError(f"thresholds must be strictly increasing, got {self.thresholds}")
        if not self.seeds:
            raise ConfigError("need at least one seed per cell")

    def cells(self):
        for target in self.targets:
            for variant in self.variants:
                for threshold in self.thresholds:
                    for seed in self.seeds:
                        yield Cell(target, variant, threshold, seed)


@dataclass(frozen=True)
class Cell:
    language: str
    variant: str
    threshold: object
    seed: int

    @property
    def key(self):
        return (self.language, self.variant, threshold_label(self.threshold), str(self.seed))

    @property
    def cell_id(self):
        return "-".join(self.key)


@dataclass
class SweepRow:
    language: str
    variant: str
    threshold: object
    seed: int
    test_ppl: float
    valid_ppl: float
    epochs: int
    seconds: float

    @property
    def key(self):
        return (self.language, self.variant, threshold_label(self.threshold), str(self.seed))

    def as_csv(self):
        return [self.language, self.variant, threshold_label(self.threshold), str(self.seed),
                f"{self.test_ppl:.6f}", f"{self.valid_ppl:.6f}", str(self.epochs), f"{self.seconds:.1f}"]

    @classmethod
    def from_csv(cls, rec):
        thr = rec["threshold"]
        return cls(rec["language"], rec["variant"], FULL if thr == FULL else int(thr), int(rec["seed"]),
                   float(rec["test_ppl"]), float(rec["valid_ppl"]), int(rec["epochs"]), float(rec["seconds"]))


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (cell_id, message)

    def medians(self, field_name="test_ppl"):
        """``{(language, variant, threshold): median over seeds}``."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r.language, r.variant, threshold_label(r.threshold)), []).append(getattr(r, field_name))
        return {k: float(np.median(v)) for k, v in groups.items()}


@dataclass
class SweepSettings:
    """Model size and training configuration shared by every cell."""
    emb: int = 64
    hidden: int = 128
    train: TrainingConfig = field(default_factory=TrainingConfig)
    eval_batch_size: int = 10


class PackCache:
    """Prepared packs keyed by (language, threshold), built on first use."""

    def __init__(self, corpora):
        self.corpora = corpora
        self.packs = {}

    def get(self, language, threshold):
        key = (language, threshold_label(threshold))
        if key not in self.packs:
            train, test = self.corpora[language]
            self.packs[key] = prepare_pack(language, train, test, threshold)
        return self.packs[key]


def run_cell(cell: Cell, spec: SweepSpec, packs: PackCache, settings: SweepSettings, log_line=None) -> SweepRow:
    """Train one cell to its best checkpoint and evaluate on the target's test split."""
    _, _, multi = variant_config(cell.variant, settings.train)
    langs = list(spec.languages) if multi else [cell.language]
    chosen = {l: packs.get(l, cell.threshold if l == cell.language else FULL) for l in langs}
    cfg = dataclasses.replace(settings.train, seed=cell.seed)
    model, cfg, rngs = build_for_variant(cell.variant, langs, [len(chosen[l].vocab) for l in langs],
                                         settings.emb, settings.hidden, cfg)
    trainer = Trainer(
        model,
        {l: chosen[l].train for l in langs},
        cfg,
        valid_streams={l: chosen[l].valid for l in langs},
        eos={l: chosen[l].vocab.eos_index for l in langs},
        monitor=[cell.language],
        rngs=rngs,
    )
    t0 = time.perf_counter()
    result = trainer.fit(log_line=log_line)
    target = chosen[cell.language]
    test = perplexity(model, cell.language, target.test, settings.eval_batch_size, cfg.bptt, target.vocab.eos_index)
    return SweepRow(cell.language, cell.variant, cell.threshold, cell.seed, test, result.best_valid,
                    result.epochs_run, time.perf_counter() - t0)


def read_rows(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return [SweepRow.from_csv(rec) for rec in reader]


def run_sweep(spec: SweepSpec, corpora, settings: SweepSettings | None = None, csv_path=None, log_dir=None,
              resume=True, progress=None) -> SweepReport:
    """Run every cell of ``spec``; ``corpora`` maps language -> (train, test) sentences.

    With ``csv_path`` each finished row is appended immediately, and on
    ``resume`` rows already present are kept and their cells skipped.  A cell
    that fails is recorded in ``report.failures`` and the sweep moves on.
    """
    settings = settings or SweepSettings()
    missing = [l for l in spec.languages if l not in corpora]
    if missing:
        raise ConfigError(f"no corpus for language {missing[0]!r}")
    packs = PackCache(corpora)
    report = SweepReport()
    done = {}
    if csv_path is not None:
        csv_path = Path(csv_path)
        if resume:
            for row in read_rows(csv_path):
                done[row.key] = row
        elif csv_path.exists():
            csv_path.unlink()
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    for cell in spec.cells():
        if cell.key in done:
            report.rows.append(done[cell.key])
            continue
        lines = []
        try:
            row = run_cell(cell, spec, packs, settings, log_line=lines.append)
        except (TrainingAborted, FloatingPointError, ValueError, ArithmeticError) as e:
            report.failures.append((cell.cell_id, str(e)))
            log.warning("cell %s failed: %s", cell.cell_id, e)
            continue
        finally:
            if log_dir is not None:
                (Path(log_dir) / f"{cell.cell_id}.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
        report.rows.append(row)
        if csv_path is not None:
            _append_row(csv_path, row)
        if progress is not None:
            progress(row)
    return report


def _append_row(path, row):
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(CSV_FIELDS)
        w.writerow(row.as_csv())


# ---------------------------------------------------------------------------
# reporting

def size_label(threshold):
    if threshold == FULL:
        return FULL
    t = int(threshold)
    return f"{t // 1000}K" if t % 1000 == 0 else str(t)


def format_csv(report: SweepReport, with_seconds=True) -> str:
    lines = [",".join(CSV_FIELDS)]
    for r in report.rows:
        vals = r.as_csv()
        if not with_seconds:
            vals[-1] = ""
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def format_table(report: SweepReport) -> str:
    """Variants x thresholds per language, seed medians to two decimals, column best starred."""
    med = report.medians()
    blocks = []
    languages = list(dict.fromkeys(r.language for r in report.rows))
    for lang in languages:
        variants = list(dict.fromkeys(r.variant for r in report.rows if r.language == lang))
        thresholds = sorted({r.threshold for r in report.rows if r.language == lang}, key=_threshold_key)
        labels = [threshold_label(t) for t in thresholds]
        best = {}
        for lab in labels:
            vals = [med[(lang, v, lab)] for v in variants if (lang, v, lab) in med]
            best[lab] = min(vals) if vals else None
        vw = max(len("Model"), *(len(v) for v in variants))
        head = f"{'Model':<{vw}} |" + "".join(f"{size_label(t):>10}" for t in thresholds)
        out = [f"Perplexity ({lang})", head, "-" * len(head)]
        for v in variants:
            cells = []
            for lab in labels:
                x = med.get((lang, v, lab))
                if x is None:
                    cells.append(f"{'-':>10}")
                else:
                    mark = "*" if x == best[lab] else " "
                    cells.append(f"{x:9.2f}{mark}")
            out.append(f"{v:<{vw}} |" + "".join(cells))
        blocks.append("\n".join(out))
    return "\n\n".join(blocks) + "\n"


def emit_report(report: SweepReport, fmt="text", path=None) -> str:
    """Render ``report`` as ``csv`` or ``text`` and write it to ``path`` if given."""
    if not report.rows:
        raise ValueError("cannot emit an empty report")
    if fmt == "csv":
        text = format_csv(report)
    elif fmt in ("text", "table"):
        text = format_table(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def inversions(values):
    """Number of increases along a sequence that should be non-increasing."""
    return sum(b > a for a, b in zip(values, values[1:]))
