"""Text preprocessing, vocabulary/UNK policy, prepared packs and cyclic batching."""
from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNK = "<unk>"
EOS = "<eos>"
FULL = "FULL"
UNK_FRACTION = 0.25


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# preprocessing

def _strip_punct(text):
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def clean_line(line: str) -> list[str]:
    """Delete punctuation in place, case-fold, split on whitespace."""
    return _strip_punct(line).casefold().split()


def preprocess_corpus(lines, language=None) -> list[list[str]]:
    """Tokenize raw lines (``str`` or UTF-8 ``bytes``); empty results are dropped."""
    out = []
    for lineno, line in enumerate(lines, 1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as e:
                where = f" ({language})" if language else ""
                raise CorpusError(f"invalid UTF-8 on line {lineno}{where}: {e.reason}") from None
        tokens = clean_line(line)
        if tokens:
            out.append(tokens)
    return out


def read_corpus(path, language=None) -> list[list[str]]:
    with open(path, "rb") as f:
        return preprocess_corpus(f, language)


def word_count(sentences) -> int:
    return sum(len(s) for s in sentences)


def split_validation(sentences, target_words):
    """Move the tail of the training text (about ``target_words`` words) to validation.

    Sentences are taken from the end until the count reaches ``target_words``;
    at least one sentence stays in each part.
    """
    if len(sentences) < 2:
        raise CorpusError("need at least two training sentences to split off validation")
    n = 0
    cut = len(sentences)
    while cut > 1 and n < target_words:
        cut -= 1
        n += len(sentences[cut])
    return sentences[:cut], sentences[cut:]


def truncate_training(sentences, threshold):
    """Longest prefix of whole sentences with at most ``threshold`` words."""
    if threshold == FULL or threshold is None:
        return list(sentences)
    threshold = int(threshold)
    if threshold <= 0:
        raise CorpusError("threshold must be positive or FULL")
    out, n = [], 0
    for s in sentences:
        if n + len(s) > threshold:
            break
        out.append(s)
        n += len(s)
    if not out:
        raise CorpusError(f"threshold {threshold} is smaller than the first sentence ({len(sentences[0])} words)")
    return out


def parse_threshold(value):
    if isinstance(value, str):
        v = value.strip()
        if v.upper() == FULL:
            return FULL
        if v.upper().endswith("K"):
            return int(float(v[:-1]) * 1000)
        return int(v)
    return int(value)


def threshold_label(threshold):
    return FULL if threshold == FULL else str(int(threshold))


# ---------------------------------------------------------------------------
# vocabulary

def unk_candidates(counts: Counter, k: int):
    """The k types replaced by UNK: frequency ascending, ties by token descending."""
    by_token_desc = sorted(counts, reverse=True)
    return sorted(by_token_desc, key=counts.__getitem__)[:k]


@dataclass
class Vocabulary:
    itos: list[str]
    counts: Counter
    replaced: frozenset = frozenset()
    unk_index: int = 0
    stoi: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def index(self, token):
        return self.stoi.get(token, self.unk_index)

    def encode(self, tokens):
        get = self.stoi.get
        return np.fromiter((get(t, 0) for t in tokens), dtype=np.int64, count=len(tokens))

    def decode(self, indices):
        return [self.itos[i] for i in indices]

    @property
    def eos_index(self):
        return self.stoi.get(EOS)


def build_vocabulary(tokens) -> Vocabulary:
    """Frequency vocabulary with the 25% rarest word types folded into UNK.

    ``<eos>`` (and a literal ``<unk>``) never counts as a word type and is
    never replaced; ``<eos>`` is ranked with the kept types.
    """
    counts = Counter(tokens)
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty token stream")
    counts.pop(UNK, None)
    words = Counter({w: c for w, c in counts.items() if w != EOS})
    k = math.floor(UNK_FRACTION * len(words))
    replaced = frozenset(unk_candidates(words, k))
    kept = sorted((w for w in counts if w not in replaced), key=lambda w: (-counts[w], w))
    return Vocabulary([UNK] + kept, counts, replaced)


# ---------------------------------------------------------------------------
# prepared packs

def flatten(sentences) -> list[str]:
    out = []
    for s in sentences:
        out.extend(s)
        out.append(EOS)
    return out


@dataclass
class LanguagePack:
    language: str
    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    counts: dict  # surface words per split (no <eos>)
    threshold: object = FULL
    seed: int = 0

    def split(self, name):
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def prepare_pack(language, train_sentences, test_sentences, threshold=FULL, valid_sentences=None, seed=0):
    """Split validation, truncate training text, build the vocabulary, encode."""
    if not train_sentences:
        raise CorpusError(f"{language}: empty training corpus")
    if not test_sentences:
        raise CorpusError(f"{language}: empty test corpus")
    if valid_sentences is None:
        train_sentences, valid_sentences = split_validation(train_sentences, word_count(test_sentences))
    train_sentences = truncate_training(train_sentences, threshold)
    train_tokens = flatten(train_sentences)
    vocab = build_vocabulary(train_tokens)
    return LanguagePack(
        language=language,
        vocab=vocab,
        train=vocab.encode(train_tokens),
        valid=vocab.encode(flatten(valid_sentences)),
        test=vocab.encode(flatten(test_sentences)),
        counts={
            "train": word_count(train_sentences),
            "valid": word_count(valid_sentences),
            "test": word_count(test_sentences),
        },
        threshold=threshold,
        seed=seed,
    )


def save_pack(pack: LanguagePack, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "vocab.txt", "w", encoding="utf-8") as f:
        for w in pack.vocab.itos:
            f.write(w + "\n")
    for split in ("train", "valid", "test"):
        pack.split(split).astype("<u4").tofile(d / f"{split}.idx")
    meta = {
        "language": pack.language,
        "threshold": threshold_label(pack.threshold),
        "seed": pack.seed,
        "vocab_size": len(pack.vocab),
        "unk_replaced": len(pack.vocab.replaced),
    }
    for split in ("train", "valid", "test"):
        meta[f"{split}_words"] = pack.counts[split]
        meta[f"{split}_tokens"] = len(pack.split(split))
    with open(d / "meta", "w", encoding="utf-8") as f:
        for k, v in meta.items():
            f.write(f"{k} = {v}\n")


def read_meta(path) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    return meta


def load_pack(directory) -> LanguagePack:
    d = Path(directory)
    if not (d / "meta").exists():
        raise CorpusError(f"{d}: not a prepared pack (missing meta)")
    meta = read_meta(d / "meta")
    with open(d / "vocab.txt", encoding="utf-8") as f:
        itos = [line.rstrip("\n") for line in f]
    splits = {}
    for split in ("train", "valid", "test"):
        arr = np.fromfile(d / f"{split}.idx", dtype="<u4").astype(np.int64)
        if len(arr) != int(meta[f"{split}_tokens"]):
            raise CorpusError(f"{d / (split + '.idx')}: expected {meta[split + '_tokens']} indices, found {len(arr)}")
        if arr.size and arr.max() >= len(itos):
            raise CorpusError(f"{d / (split + '.idx')}: index beyond vocabulary of size {len(itos)}")
        splits[split] = arr
    vocab = Vocabulary(itos, Counter())
    return LanguagePack(
        language=meta["language"],
        vocab=vocab,
        counts={s: int(meta[f"{s}_words"]) for s in ("train", "valid", "test")},
        threshold=parse_threshold(meta["threshold"]),
        seed=int(meta.get("seed", 0)),
        **splits,
    )


def format_counts_table(packs) -> str:
    """Word counts per split in a Train/Valid/Test x language layout."""
    names = [p.language for p in packs]
    width = max([8] + [len(n) for n in names]) + 2
    lines = [" " * 7 + "|" + "".join(n.rjust(width) for n in names)]
    lines.append("-" * len(lines[0]))
    for split, label in (("train", "Train"), ("valid", "Valid."), ("test", "Test")):
        lines.append(label.ljust(7) + "|" + "".join(str(p.counts[split]).rjust(width) for p in packs))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# batching

@dataclass
class BatchStream:
    """Index stream reshaped to ``B`` contiguous rows, consumed cyclically."""
    language: str
    data: np.ndarray  # (B, L)
    cursor: int = 0
    segments: int = 0
    wraps: int = 0

    @property
    def length(self):
        return self.data.shape[1]

    @property
    def batch_size(self):
        return self.data.shape[0]

    def take(self, n):
        """Inputs and next-token targets for ``n`` columns from the cursor, wrapping."""
        B, L = self.data.shape
        cols = (self.cursor + np.arange(n)) % L
        nxt = cols + 1
        inputs = self.data[:, cols]
        flat = self.data.reshape(-1)
        # target of a row's last column is the next token of the underlying stream
        rows = np.arange(B)[:, None]
        pos = (rows * L + nxt[None, :]) % (B * L)
        pos = np.where(nxt[None, :] == L, ((rows + 1) % B) * L, pos)
        targets = flat[pos]
        self.wraps += (self.cursor + n) // L
        self.cursor = (self.cursor + n) % L
        self.segments += 1
        return inputs, targets

    def reset(self):
        self.cursor = 0
        self.segments = 0
        self.wraps = 0


def batchify(stream, batch_size, language="") -> BatchStream:
    stream = np.asarray(stream, dtype=np.int64)
    n = len(stream)
    if batch_size < 1 or n < batch_size:
        raise CorpusError(f"stream of {n} tokens is shorter than batch size {batch_size}")
    L = n // batch_size
    return BatchStream(language, stream[: L * batch_size].reshape(batch_size, L).copy())


@dataclass
class SegmentPlan:
    length: int
    base_length: int = 70

    @property
    def scale(self):
        return self.length / self.base_length


def sample_segment_plan(rng, base=70, deterministic=False, p_full=0.95, std=5.0, min_length=5, max_extra=20):
    """Variable-length segment: centre ``base`` (prob. p_full) or ``base/2``, Normal jitter."""
    if base < min_length:
        raise CorpusError(f"base length must be >= {min_length}")
    if deterministic:
        return SegmentPlan(base, base)
    centre = base if rng.random() < p_full else base / 2.0
    draw = rng.normal(centre, std)
    length = min(max(min_length, int(round(draw))), base + max_extra)
    return SegmentPlan(length, base)


def next_multilingual_segment(streams, length):
    """One segment of the same length for every language, advancing cursors cyclically."""
    if isinstance(length, SegmentPlan):
        length = length.length
    sizes = {s.batch_size for s in streams}
    if len(sizes) > 1:
        raise CorpusError(f"streams batchified with different batch sizes {sorted(sizes)}")
    return [s.take(length) for s in streams]


def epoch_segment_lengths(longest, plans):
    """Clip a sequence of planned lengths so they cover ``longest`` columns exactly."""
    out, used = [], 0
    for plan in plans:
        if used >= longest:
            break
        n = min(plan.length, longest - used)
        out.append((n, plan))
        used += n
    return out
