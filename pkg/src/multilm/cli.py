"""Command-line entry point: ``multilm prepare | train | eval | sweep``.

Settings come from an INI file (``--config``) with sections ``[data]``,
``[model]``, ``[train]``, ``[sweep]`` and ``[output]``; flags override file
values.  The effective configuration is written next to the outputs.

Exit codes: 0 success, 1 usage or validation error, 2 refusal to overwrite,
3 incompatible checkpoint and pack, 4 training failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .corpus import FULL, CorpusError, format_counts_table, load_pack, parse_threshold, prepare_pack, read_corpus, save_pack, threshold_label
from .evaluate import perplexity
from .model import parse_pattern
from .rnn import ConfigError
from .sweep import DESK_THRESHOLDS, FULL_SIZE_THRESHOLDS, SweepSettings, SweepSpec, emit_report, run_sweep
from .train import (
    VARIANTS,
    CheckpointError,
    Trainer,
    TrainingAborted,
    TrainingConfig,
    build_for_variant,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)

EXIT_OK, EXIT_USAGE, EXIT_EXISTS, EXIT_INCOMPATIBLE, EXIT_TRAINING = 0, 1, 2, 3, 4
TOY_LANGUAGES = ("xa", "xb", "xc")


class UsageError(Exception):
    pass


class Refused(Exception):
    pass


class Incompatible(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DataSection:
    languages: tuple = ()          # empty: every language found in corpus_dir
    corpus_dir: str = ""           # empty: the bundled toy corpora
    threshold: str = FULL
    paths: dict = field(default_factory=dict)        # "<lang>.train" / "<lang>.test" -> path
    thresholds: dict = field(default_factory=dict)   # lang -> threshold label


@dataclass
class ModelSection:
    emb: int = 64
    hidden: int = 128
    pattern: str = "SSP"
    variant: str = "multi-awd"


@dataclass
class SweepSection:
    variants: tuple = VARIANTS
    thresholds: tuple = tuple(threshold_label(t) for t in DESK_THRESHOLDS)
    seeds: tuple = (0, 1, 2)
    targets: tuple = ()
    grid: str = "desk"


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainingConfig = field(default_factory=lambda: TrainingConfig(max_epochs=60))
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def out(self):
        return Path(self.output.dir)


SECTIONS = ("data", "model", "train", "sweep", "output")


def _convert(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and all(isinstance(d, int) for d in default):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None
    return text


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise UsageError(f"config: {e}") from None
    cfg = RunConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise UsageError(f"config: unknown section [{name}]")
        section = getattr(cfg, name)
        known = {f.name: f for f in fields(section)}
        updates = {}
        for key, raw in cp.items(name):
            if name == "data" and "." in key:
                lang, _, what = key.rpartition(".")
                if what in ("train", "test"):
                    section.paths[key] = raw.strip()
                    continue
                if what == "threshold":
                    section.thresholds[lang] = threshold_label(_threshold(raw))
                    continue
            if key not in known or (name == "data" and key in ("paths", "thresholds")):
                raise UsageError(f"config: unknown key {key!r} in [{name}]")
            updates[key] = _convert(f"[{name}] {key}", raw, getattr(section, key))
        try:
            setattr(cfg, name, dataclasses.replace(section, **updates))
        except (ConfigError, TypeError) as e:
            raise UsageError(f"config [{name}]: {e}") from None
    validate(cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        cp.add_section(name)
        for f in fields(section):
            if name == "data" and f.name in ("paths", "thresholds"):
                continue
            cp.set(name, f.name, _render(getattr(section, f.name)))
        if name == "data":
            for key, path in sorted(section.paths.items()):
                cp.set(name, key, path)
            for lang, thr in sorted(section.thresholds.items()):
                cp.set(name, f"{lang}.threshold", thr)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _threshold(text):
    try:
        return parse_threshold(text)
    except ValueError:
        raise UsageError(f"bad threshold {text!r}") from None


def validate(cfg: RunConfig):
    parse_pattern(cfg.model.pattern)
    if cfg.model.variant not in VARIANTS:
        raise UsageError(f"unknown variant {cfg.model.variant!r}; choose from {', '.join(VARIANTS)}")
    if cfg.model.emb <= 0 or cfg.model.hidden <= 0:
        raise UsageError("emb and hidden must be positive")
    for v in cfg.sweep.variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown sweep variant {v!r}")
    if cfg.sweep.grid not in ("desk", "full"):
        raise UsageError("sweep grid must be desk or full")
    _threshold(cfg.data.threshold)
    for t in cfg.sweep.thresholds:
        _threshold(t)


# ---------------------------------------------------------------------------
# corpora

def toy_corpus_dir() -> Path:
    return Path(str(resources.files("multilm") / "data" / "toy"))


def corpus_paths(cfg: RunConfig) -> dict:
    """``{language: (train path, test path)}``, checking that every file exists."""
    base = Path(cfg.data.corpus_dir) if cfg.data.corpus_dir else toy_corpus_dir()
    langs = list(cfg.data.languages)
    if not langs:
        if not base.is_dir():
            raise UsageError(f"corpus directory {base} does not exist")
        langs = sorted(p.name[: -len(".train.txt")] for p in base.glob("*.train.txt"))
        if not langs:
            raise UsageError(f"no *.train.txt corpora in {base}")
    out = {}
    for lang in langs:
        train = Path(cfg.data.paths.get(f"{lang}.train", base / f"{lang}.train.txt"))
        test = Path(cfg.data.paths.get(f"{lang}.test", base / f"{lang}.test.txt"))
        for p in (train, test):
            if not p.is_file():
                raise UsageError(f"missing corpus file {p}")
        out[lang] = (train, test)
    return out


def read_corpora(cfg: RunConfig) -> dict:
    corpora = {}
    for lang, (train, test) in corpus_paths(cfg).items():
        tr, te = read_corpus(train, lang), read_corpus(test, lang)
        if not tr or not te:
            raise UsageError(f"{lang}: empty corpus")
        corpora[lang] = (tr, te)
    return corpora


def language_threshold(cfg: RunConfig, lang):
    return _threshold(cfg.data.thresholds.get(lang, cfg.data.threshold))


# ---------------------------------------------------------------------------
# commands

def _write_effective_config(cfg: RunConfig):
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")


def cmd_prepare(cfg: RunConfig, args) -> int:
    corpora = read_corpora(cfg)
    root = cfg.out / "packs"
    existing = [l for l in corpora if (root / l / "meta").exists()]
    if existing and not args.force:
        raise Refused(f"pack {root / existing[0]} already exists (use --force to overwrite)")
    packs = []
    for lang, (train, test) in corpora.items():
        try:
            pack = prepare_pack(lang, train, test, language_threshold(cfg, lang), seed=cfg.train.seed)
        except CorpusError as e:
            raise UsageError(str(e)) from None
        save_pack(pack, root / lang)
        packs.append(pack)
    _write_effective_config(cfg)
    print(format_counts_table(packs))
    return EXIT_OK


def _load_packs(cfg, languages):
    packs = {}
    for lang in languages:
        d = cfg.out / "packs" / lang
        try:
            packs[lang] = load_pack(d)
        except (CorpusError, FileNotFoundError) as e:
            raise UsageError(f"{lang}: {e} (run prepare first)") from None
    return packs


def _selected_languages(cfg, args):
    if getattr(args, "languages", None):
        return [s.strip() for s in args.languages.split(",") if s.strip()]
    if cfg.data.languages:
        return list(cfg.data.languages)
    root = cfg.out / "packs"
    langs = sorted(p.parent.name for p in root.glob("*/meta"))
    if not langs:
        raise UsageError(f"no prepared packs under {root} (run prepare first)")
    return langs


def cmd_train(cfg: RunConfig, args) -> int:
    if cfg.train.max_epochs < 1:
        raise UsageError("max_epochs must be at least 1 (an untrained checkpoint is not written)")
    langs = _selected_languages(cfg, args)
    ckpt = cfg.out / "model.ckpt"
    if ckpt.exists() and not args.force:
        raise Refused(f"{ckpt} already exists (use --force to overwrite)")
    variant = cfg.model.variant
    if variant != "multi-awd" and len(langs) != 1:
        raise UsageError(f"{variant} trains one language; pass --languages with a single id")
    packs = _load_packs(cfg, langs)
    cfg.data = dataclasses.replace(cfg.data, languages=tuple(langs))
    pattern = None if variant != "multi-awd" else parse_pattern(cfg.model.pattern)
    model, tcfg, rngs = build_for_variant(variant, langs, [len(packs[l].vocab) for l in langs],
                                          cfg.model.emb, cfg.model.hidden, cfg.train, pattern=pattern)
    trainer = Trainer(model, {l: packs[l].train for l in langs}, tcfg,
                      valid_streams={l: packs[l].valid for l in langs},
                      eos={l: packs[l].vocab.eos_index for l in langs}, rngs=rngs)
    _write_effective_config(cfg)
    log_path = cfg.out / "train.log"
    with open(log_path, "w", encoding="utf-8") as logf:
        def emit(line):
            print(line, flush=True)
            logf.write(line + "\n")
            logf.flush()
        result = trainer.fit(log_line=emit)
    save_checkpoint(model, ckpt, epoch=result.best_epoch, valid_ppl=trainer.validate(), lr=trainer.lr,
                    extra={"variant": variant, "seed": cfg.train.seed})
    print(f"best epoch {result.best_epoch}, mean valid ppl {result.best_valid:.2f}; wrote {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    path = Path(args.checkpoint) if args.checkpoint else cfg.out / "model.ckpt"
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError as e:
        raise Incompatible(str(e)) from None
    mc = ckpt.model_config()
    lang = args.language or mc.languages[0]
    if lang not in mc.languages:
        raise Incompatible(f"checkpoint has no language {lang!r} (has {', '.join(mc.languages)})")
    pack = _load_packs(cfg, [lang])[lang]
    expected = mc.vocab_size(lang)
    if len(pack.vocab) != expected:
        raise Incompatible(f"vocabulary size mismatch for {lang}: checkpoint {expected}, pack {len(pack.vocab)}")
    model = model_from_checkpoint(ckpt)
    ppl = perplexity(model, lang, pack.split(args.split), cfg.train.eval_batch_size, cfg.train.bptt,
                     pack.vocab.eos_index)
    print(f"{ppl:.2f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    corpora = read_corpora(cfg)
    thresholds = FULL_SIZE_THRESHOLDS if cfg.sweep.grid == "full" else tuple(_threshold(t) for t in cfg.sweep.thresholds)
    try:
        spec = SweepSpec(tuple(corpora), cfg.sweep.variants, thresholds, cfg.sweep.seeds,
                         cfg.sweep.targets or None)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    csv_path = cfg.out / "sweep.csv"
    if csv_path.exists() and not (args.resume or args.force):
        raise Refused(f"{csv_path} already exists (use --resume to continue or --force to restart)")
    _write_effective_config(cfg)
    settings = SweepSettings(cfg.model.emb, cfg.model.hidden, cfg.train, cfg.train.eval_batch_size)

    def progress(row):
        print(f"{row.language} {row.variant} {threshold_label(row.threshold)} seed {row.seed}: "
              f"test {row.test_ppl:.2f} valid {row.valid_ppl:.2f} ({row.epochs} epochs)", flush=True)

    report = run_sweep(spec, corpora, settings, csv_path=csv_path, log_dir=cfg.out / "cells",
                       resume=args.resume, progress=progress)
    if report.rows:
        print(emit_report(report, "text", cfg.out / "sweep.txt"))
    for cell_id, msg in report.failures:
        print(f"FAILED {cell_id}: {msg}", file=sys.stderr)
    return EXIT_TRAINING if report.failures else EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random choice")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite existing outputs")
    common.add_argument("--resume", action="store_true", default=argparse.SUPPRESS, help="continue an interrupted sweep")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="multilm", description=__doc__.split("\n")[0], parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    sp = sub.add_parser("prepare", parents=[common], help="preprocess corpora into packs")
    sp.add_argument("--threshold", help="truncate every training text to this many words (or FULL)")

    sp = sub.add_parser("train", parents=[common], help="train a model on prepared packs")
    sp.add_argument("--languages", help="comma-separated language ids")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--emb", type=int)
    sp.add_argument("--hidden", type=int)

    sp = sub.add_parser("eval", parents=[common], help="perplexity of a checkpoint on a pack split")
    sp.add_argument("--checkpoint")
    sp.add_argument("--language")
    sp.add_argument("--split", choices=("test", "valid"), default="test")

    sp = sub.add_parser("sweep", parents=[common], help="data-scarcity sweep over thresholds")
    sp.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    sp.add_argument("--thresholds", help="comma-separated word counts, e.g. 5K,10K,FULL")
    sp.add_argument("--seeds", help="comma-separated seeds per cell")
    sp.add_argument("--targets", help="languages to truncate (default: all)")
    sp.add_argument("--full-grid", action="store_true", help="use the full-size threshold grid")
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--emb", type=int)
    sp.add_argument("--hidden", type=int)
    return p


def _split(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def effective_config(args) -> RunConfig:
    path = getattr(args, "config", None)
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        cfg = parse_config(p.read_text(encoding="utf-8"))
    else:
        cfg = RunConfig()
    train = {}
    if hasattr(args, "seed"):
        train["seed"] = args.seed
    if getattr(args, "max_epochs", None) is not None:
        train["max_epochs"] = args.max_epochs
    if train:
        cfg.train = dataclasses.replace(cfg.train, **train)
    if hasattr(args, "out"):
        cfg.output = OutputSection(args.out)
    model = {k: getattr(args, k) for k in ("emb", "hidden", "variant") if getattr(args, k, None) is not None}
    if model:
        cfg.model = dataclasses.replace(cfg.model, **model)
    if getattr(args, "threshold", None):
        cfg.data = dataclasses.replace(cfg.data, threshold=threshold_label(_threshold(args.threshold)))
    sweep = {}
    if getattr(args, "variants", None):
        sweep["variants"] = _split(args.variants)
    if getattr(args, "thresholds", None):
        sweep["thresholds"] = _split(args.thresholds)
    if getattr(args, "seeds", None):
        try:
            sweep["seeds"] = tuple(int(s) for s in _split(args.seeds))
        except ValueError:
            raise UsageError(f"bad --seeds {args.seeds!r}") from None
    if getattr(args, "targets", None):
        sweep["targets"] = _split(args.targets)
    if getattr(args, "full_grid", False):
        sweep["grid"] = "full"
    if sweep:
        cfg.sweep = dataclasses.replace(cfg.sweep, **sweep)
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help, or a usage error already reported
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    for flag in ("force", "resume", "verbose"):
        if not hasattr(args, flag):
            setattr(args, flag, False)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Refused as e:
        print(f"refusing: {e}", file=sys.stderr)
        return EXIT_EXISTS
    except Incompatible as e:
        print(f"incompatible: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except TrainingAborted as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
