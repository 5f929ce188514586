"""Joint multilingual objective, SGD training loop, LR schedule and checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .corpus import BatchStream, batchify, next_multilingual_segment, sample_segment_plan
from .evaluate import perplexity
from .model import (
    DEFAULT_PATTERN,
    PER_LANGUAGE,
    DropoutRates,
    ModelConfig,
    MonolithicLM,
    MultilingualLM,
    sample_masks,
)
from .rnn import ConfigError

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 20
    bptt: int = 70
    lr: float = 30.0
    max_epochs: int = 200
    dropout_input: float = 0.65
    dropout_output: float = 0.4
    dropout_hidden: float = 0.3
    dropout_embedding: float = 0.1
    weight_drop: float = 0.5
    locked_dropout: bool = True
    embedding_dropout_per_row: bool = False
    alpha: float = 2.0
    beta: float = 1.0
    clip: float = 0.25
    patience: int = 5
    anneal_factor: float = 4.0
    min_lr: float = 1e-3
    variable_length: bool = True
    optimizer: str = "sgd"
    eval_batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("dropout_input", "dropout_output", "dropout_hidden", "dropout_embedding", "weight_drop"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.optimizer not in ("sgd", "asgd"):
            raise ConfigError(f"optimizer must be sgd or asgd, got {self.optimizer!r}")
        if self.batch_size < 1 or self.bptt < 5:
            raise ConfigError("batch_size >= 1 and bptt >= 5 required")

    @property
    def rates(self) -> DropoutRates:
        return DropoutRates(self.dropout_input, self.dropout_output, self.dropout_hidden,
                            self.dropout_embedding, self.weight_drop, self.locked_dropout,
                            self.embedding_dropout_per_row)

    def any_dropout(self):
        r = self.rates
        return any((r.input, r.output, r.hidden, r.embedding, r.weight))


VARIANTS = ("mono-lstm", "mono-awd", "multi-awd")


def variant_config(variant, base: TrainingConfig):
    """``(TrainingConfig, sharing pattern, multilingual?)`` for a named model variant.

    mono-lstm keeps only plain input/output dropout; the AWD variants use every
    regularizer of ``base``.
    """
    if variant == "mono-lstm":
        cfg = dataclasses.replace(base, dropout_hidden=0.0, dropout_embedding=0.0, weight_drop=0.0,
                                  locked_dropout=False, alpha=0.0, beta=0.0, variable_length=False)
        return cfg, (PER_LANGUAGE,) * 3, False
    if variant == "mono-awd":
        return base, (PER_LANGUAGE,) * 3, False
    if variant == "multi-awd":
        return base, DEFAULT_PATTERN, True
    raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def make_rngs(seed):
    init, dropout, length = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init),
        "dropout": np.random.default_rng(dropout),
        "length": np.random.default_rng(length),
    }


# ---------------------------------------------------------------------------
# objective

class StepResult(NamedTuple):
    loss: ag.Tensor
    ce: dict
    ar: dict
    tar: dict
    states: dict


def activation_penalties(raw: ag.Tensor, dropped: ag.Tensor, alpha, beta, M):
    """AR on the dropped final activations, TAR on the raw ones, both scaled by 1/M."""
    ar = tar = None
    if alpha > 0:
        ar = ag.scale(ag.mean(ag.square(dropped)), alpha / M)
    T = raw.shape[1]
    if beta > 0 and T > 1:
        diff = ag.sub(ag.slice(raw, 1, T, axis=1), ag.slice(raw, 0, T - 1, axis=1))
        tar = ag.scale(ag.mean(ag.square(diff)), beta / M)
    return ar, tar


def joint_step(model, segments, states, masks, config: TrainingConfig) -> StepResult:
    """Build the joint loss ``(1/M) sum_l CE_l + sum_l (AR_l + TAR_l)`` for one step.

    ``segments`` maps language -> (inputs, targets), all ``(B, T)`` with one T.
    """
    M = len(segments)
    lengths = {np.shape(x)[1] for x, _ in segments.values()}
    if len(lengths) != 1:
        raise ag.DimensionError(f"joint_step: unequal segment lengths {sorted(lengths)}")
    ce_sum = None
    penalties = []
    ce, ar, tar, new_states = {}, {}, {}, {}
    for lang, (x, y) in segments.items():
        out = model.forward(lang, x, states[lang], masks.get(lang) if masks else None)
        loss_l = ag.softmax_cross_entropy(out.logits, y)
        ce[lang] = loss_l.item()
        ce_sum = loss_l if ce_sum is None else ag.add(ce_sum, loss_l)
        a, t = activation_penalties(out.raw_output, out.dropped_output, config.alpha, config.beta, M)
        ar[lang] = a.item() if a is not None else 0.0
        tar[lang] = t.item() if t is not None else 0.0
        penalties += [p for p in (a, t) if p is not None]
        new_states[lang] = out.state
    total = ag.scale(ce_sum, 1.0 / M)
    for p in penalties:
        total = ag.add(total, p)
    if not math.isfinite(total.item()):
        raise TrainingAborted(f"non-finite loss; per-language CE {ce}")
    return StepResult(total, ce, ar, tar, new_states)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def sgd_update(params, lr):
    for p in params:
        if p.grad is not None:
            p.sub_(lr * p.grad)


# ---------------------------------------------------------------------------
# schedule

class Scheduler:
    """Plateau schedule on validation perplexity.

    After more than ``patience`` epochs without improvement the learning rate
    is divided by ``factor`` (sgd) or, the first time in asgd mode, parameter
    averaging is switched on.  Stops at ``max_epochs`` or when lr < ``min_lr``.
    """

    def __init__(self, lr, patience=5, factor=4.0, min_lr=1e-3, max_epochs=200, mode="sgd"):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.max_epochs = max_epochs
        self.mode = mode
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.averaging = False
        self.history = []

    def step(self, epoch, value):
        self.history.append(value)
        improved = value < self.best
        if improved:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        action = "continue"
        if self.bad_epochs > self.patience:
            self.bad_epochs = 0
            if self.mode == "asgd" and not self.averaging:
                self.averaging = True
                action = "average"
            else:
                self.lr /= self.factor
                action = "anneal"
        if epoch >= self.max_epochs or self.lr < self.min_lr:
            action = "stop"
        return action


def validate_and_schedule(scheduler: Scheduler, epoch, valid_ppls: dict):
    """Mean validation perplexity across languages drives the schedule."""
    return scheduler.step(epoch, float(np.mean(list(valid_ppls.values()))))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: dict
    valid_ppl: dict
    segments: int
    action: str
    seconds: float

    def log_line(self):
        tl = " ".join(f"{k}={v:.4f}" for k, v in self.train_loss.items())
        vp = " ".join(f"{k}={v:.2f}" for k, v in self.valid_ppl.items())
        return f"epoch {self.epoch} | lr {self.lr:.6g} | segments {self.segments} | train {tl} | valid {vp} | {self.action}"


@dataclass
class FitResult:
    best_epoch: int
    best_valid: float
    epochs_run: int
    history: list = field(default_factory=list)
    seconds: float = 0.0


class Trainer:
    """Owns the model, the per-language streams and every random generator."""

    def __init__(self, model, train_streams: dict, config: TrainingConfig, valid_streams=None,
                 eos=None, monitor=None, rngs=None):
        self.model = model
        self.config = config
        self.languages = list(model.languages)
        self.streams = [batchify(train_streams[lang], config.batch_size, lang) for lang in self.languages]
        self.valid_streams = valid_streams or {}
        self.eos = eos or {}
        self.monitor = list(monitor) if monitor else list(self.valid_streams)
        self.rngs = rngs if rngs is not None else make_rngs(config.seed)
        self.params = model.parameters()
        self.names = [n for n, _ in model.named_parameters()]
        self.scheduler = Scheduler(config.lr, config.patience, config.anneal_factor, config.min_lr,
                                   config.max_epochs, config.optimizer)
        self.epoch = 0
        self.averages = None
        self.avg_count = 0
        self.best_snapshot = None
        self.step_losses = []

    @property
    def lr(self):
        return self.scheduler.lr

    def segments_per_epoch(self):
        return max(s.length for s in self.streams)

    def train_epoch(self):
        cfg = self.config
        model = self.model
        B = cfg.batch_size
        longest = self.segments_per_epoch()
        states = {lang: model.init_state(lang, B) for lang in self.languages}
        sums = {lang: 0.0 for lang in self.languages}
        used = steps = 0
        t0 = time.perf_counter()
        do_masks = cfg.any_dropout()
        while used < longest:
            plan = sample_segment_plan(self.rngs["length"], cfg.bptt, deterministic=not cfg.variable_length)
            n = min(plan.length, longest - used)
            batches = next_multilingual_segment(self.streams, n)
            segments = dict(zip(self.languages, batches))
            masks = None
            if do_masks:
                masks = {lang: sample_masks(model, lang, B, n, cfg.rates, self.rngs["dropout"]) for lang in self.languages}
            for p in self.params:
                p.zero_grad()
            try:
                res = joint_step(model, segments, states, masks, cfg)
            except TrainingAborted as e:
                raise TrainingAborted(f"epoch {self.epoch + 1}, step {steps + 1}: {e}") from None
            ag.backward(res.loss)
            clip_grad_norm(self.params, cfg.clip)
            sgd_update(self.params, self.lr * n / cfg.bptt)
            if self.scheduler.averaging:
                self._accumulate_average()
            states = res.states
            self.step_losses.append(res.loss.item())
            for lang, v in res.ce.items():
                sums[lang] += v
            used += n
            steps += 1
        self.epoch += 1
        return {lang: s / steps for lang, s in sums.items()}, steps, time.perf_counter() - t0

    def _accumulate_average(self):
        if self.averages is None:
            self.averages = [p.data.copy() for p in self.params]
            self.avg_count = 1
            return
        self.avg_count += 1
        for a, p in zip(self.averages, self.params):
            a += (p.data - a) / self.avg_count

    def _swap_in_average(self):
        if self.averages is None:
            return None
        saved = [p.data.copy() for p in self.params]
        for p, a in zip(self.params, self.averages):
            p.assign_(a)
        return saved

    def validate(self, languages=None):
        out = {}
        saved = self._swap_in_average()
        try:
            for lang in languages or self.monitor:
                out[lang] = perplexity(self.model, lang, self.valid_streams[lang], self.config.eval_batch_size,
                                       self.config.bptt, self.eos.get(lang, 0))
        finally:
            if saved is not None:
                for p, s in zip(self.params, saved):
                    p.assign_(s)
        return out

    def snapshot(self):
        if self.averages is not None:
            return [a.copy() for a in self.averages]
        return [p.data.copy() for p in self.params]

    def restore(self, snapshot):
        for p, s in zip(self.params, snapshot):
            p.assign_(s)

    def fit(self, log_line=None) -> FitResult:
        if self.config.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        t0 = time.perf_counter()
        history = []
        while True:
            train_loss, steps, seconds = self.train_epoch()
            valid = self.validate() if self.monitor else {}
            if valid:
                lr_used = self.lr
                action = validate_and_schedule(self.scheduler, self.epoch, valid)
                if self.scheduler.best_epoch == self.epoch:
                    self.best_snapshot = self.snapshot()
            else:
                lr_used = self.lr
                action = "stop" if self.epoch >= self.config.max_epochs else "continue"
                self.best_snapshot = self.snapshot()
            stats = EpochStats(self.epoch, lr_used, train_loss, valid, steps, action, seconds)
            history.append(stats)
            if log_line is not None:
                log_line(stats.log_line())
            log.debug(stats.log_line())
            if action == "stop":
                break
        if self.best_snapshot is not None:
            self.restore(self.best_snapshot)
        return FitResult(self.scheduler.best_epoch or self.epoch, self.scheduler.best, self.epoch, history,
                         time.perf_counter() - t0)


def build_for_variant(variant, languages, vocab_sizes, emb, hidden, config: TrainingConfig, rngs=None, pattern=None):
    """Model for a variant; mono variants use :class:`MonolithicLM`."""
    cfg, default_pattern, multi = variant_config(variant, config)
    rngs = rngs if rngs is not None else make_rngs(cfg.seed)
    mc = ModelConfig(tuple(languages), tuple(vocab_sizes), emb, hidden, pattern or default_pattern)
    if not multi and len(mc.languages) == 1:
        return MonolithicLM(mc, rngs["init"]), cfg, rngs
    return MultilingualLM(mc, rngs["init"]), cfg, rngs


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MLLM"
VERSION = 1
_END = "__end__"


def _write_record(f, name, arr):
    arr = np.asarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(np.asarray(arr.shape, dtype="<u8").tobytes())
    f.write(np.ascontiguousarray(arr).tobytes())


def _meta_record(key, value):
    return f"meta:{key}={value}", np.zeros(0)


@dataclass
class Checkpoint:
    version: int
    config_hash: str
    params: dict
    meta: dict
    optimizer: dict
    epoch: int
    valid_ppl: dict

    def model_config(self) -> ModelConfig:
        m = self.meta
        return ModelConfig(
            tuple(m["languages"].split(",")),
            tuple(int(v) for v in m["vocab_sizes"].split(",")),
            int(m["emb"]), int(m["hidden"]), tuple(m["pattern"]),
        )


def save_checkpoint(model, path, epoch=0, valid_ppl=None, lr=None, averages=None, extra=None):
    """Write the MLLM checkpoint: magic, uint32 version, then named float64 records.

    A record is uint32 name length, UTF-8 name, uint32 rank, uint64 dims, then
    little-endian float64 payload.  String metadata rides in empty records
    named ``meta:key=value``; a final ``__end__`` record guards truncation.
    """
    cfg = model.config
    meta = {
        "kind": "mono" if isinstance(model, MonolithicLM) else "multi",
        "languages": ",".join(cfg.languages),
        "vocab_sizes": ",".join(map(str, cfg.vocab_sizes)),
        "emb": cfg.emb,
        "hidden": cfg.hidden,
        "pattern": "".join(cfg.pattern),
        "config_hash": cfg.config_hash(),
        "epoch": epoch,
    }
    meta.update(extra or {})
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for k, v in meta.items():
            _write_record(f, *_meta_record(k, v))
        for name, t in model.named_parameters():
            _write_record(f, "param/" + name, t.data)
        if lr is not None:
            _write_record(f, "opt/lr", np.array(lr))
        if averages is not None:
            for (name, _), a in zip(model.named_parameters(), averages):
                _write_record(f, "opt/avg/" + name, a)
        for lang, v in (valid_ppl or {}).items():
            _write_record(f, "valid_ppl/" + lang, np.array(v))
        _write_record(f, _END, np.zeros(0))
    tmp.replace(path)


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def load_checkpoint(path, expected_hash=None) -> Checkpoint:
    params, meta, opt, ppl = {}, {}, {}, {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes (not an MLLM checkpoint)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: version {version} unsupported (expected {VERSION})")
        ended = False
        while not ended:
            head = f.read(4)
            if len(head) < 4:
                raise CheckpointError(f"{path}: truncated checkpoint (missing end record)")
            (n,) = struct.unpack("<I", head)
            name = _read_exact(f, n, "record name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
            dims = tuple(int(d) for d in np.frombuffer(_read_exact(f, 8 * rank, f"dims of {name}"), dtype="<u8")) if rank else ()
            size = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(_read_exact(f, 8 * size, f"payload of {name}"), dtype="<f8").reshape(dims).copy()
            if name == _END:
                ended = True
            elif name.startswith("meta:"):
                k, _, v = name[5:].partition("=")
                meta[k] = v
            elif name.startswith("param/"):
                params[name[6:]] = payload
            elif name.startswith("opt/"):
                opt[name[4:]] = payload
            elif name.startswith("valid_ppl/"):
                ppl[name[10:]] = float(payload)
    for key in ("languages", "vocab_sizes", "emb", "hidden", "pattern", "config_hash"):
        if key not in meta:
            raise CheckpointError(f"{path}: missing metadata field {key!r}")
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise CheckpointError(f"config hash mismatch: checkpoint {meta['config_hash']} vs expected {expected_hash}")
    return Checkpoint(version, meta["config_hash"], params, meta, opt, int(meta.get("epoch", 0)), ppl)


def load_into(model, ckpt: Checkpoint):
    """Copy checkpoint arrays into ``model`` in place, validating names and shapes."""
    if ckpt.config_hash != model.config.config_hash():
        raise CheckpointError(f"config hash mismatch: checkpoint {ckpt.config_hash} vs model {model.config.config_hash()}")
    named = model.named_parameters()
    missing = [n for n, _ in named if n not in ckpt.params]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")
    for name, t in named:
        arr = ckpt.params[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {arr.shape} vs model {t.shape}")
    for name, t in named:
        t.assign_(ckpt.params[name])
    return model


def model_from_checkpoint(ckpt: Checkpoint):
    mc = ckpt.model_config()
    rng = np.random.default_rng(0)
    model = MonolithicLM(mc, rng) if ckpt.meta.get("kind") == "mono" else MultilingualLM(mc, rng)
    return load_into(model, ckpt)
