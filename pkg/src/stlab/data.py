"""Corpus handling: manifests, binary feature containers, normalization,
fallback tokenization, the synthetic speech-translation corpus, and BLEU.

A corpus is a JSON-lines manifest pointing at per-utterance feature files.
Utterances carrying a target sentence form the translation set; the rest
are transcription-only.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

UNK_ID = 0
BOS_ID = 1
EOS_ID = 2
SPECIALS = ("<unk>", "<s>", "</s>")

MAX_FRAMES = 3000


class DataError(ValueError):
    pass


class ContainerError(DataError):
    """Malformed binary tensor container."""


class ManifestError(DataError):
    """Invalid manifest line; message carries the 1-based line number."""


# ---------------------------------------------------------------------------
# binary tensor container

_MAGIC = b"CSTF"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensor(fh, array):
    """Append one tensor record: magic, version, dtype, rank, dims, payload."""
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    code = _DTYPE_CODES[arr.dtype]
    if arr.ndim > 4:
        raise ContainerError(f"rank {arr.ndim} exceeds the container limit of 4")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BBB", _VERSION, code, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())  # tobytes is C-order


def read_tensor(fh):
    """Read one tensor record; raises ContainerError on corruption."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    head = fh.read(3)
    if len(head) != 3:
        raise ContainerError("truncated header")
    version, code, rank = struct.unpack("<BBB", head)
    if version != _VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in _DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    dims = []
    for _ in range(rank):
        raw = fh.read(4)
        if len(raw) != 4:
            raise ContainerError("truncated dims")
        dims.append(struct.unpack("<I", raw)[0])
    dtype = _DTYPES[code]
    n = int(np.prod(dims)) if dims else 1
    payload = fh.read(n * dtype.itemsize)
    if len(payload) != n * dtype.itemsize:
        raise ContainerError(
            f"truncated payload: expected {n * dtype.itemsize} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_tensor(path, array):
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_tensors(path, arrays):
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path, count):
    with open(path, "rb") as fh:
        return [read_tensor(fh) for _ in range(count)]


# ---------------------------------------------------------------------------
# utterances and manifests


@dataclass
class Utterance:
    """One corpus item: features plus word-aligned transcript (and optionally
    a translation).  Spans are inclusive frame indices into the features."""

    utt_id: str
    features: np.ndarray
    src_words: list
    word_spans: list
    src_tokens: list
    tgt_words: list | None = None

    @property
    def is_triple(self):
        return self.tgt_words is not None

    @property
    def num_frames(self):
        return self.features.shape[0]

    @property
    def feat_dim(self):
        return self.features.shape[1]

    def validate(self):
        T = self.num_frames
        if len(self.word_spans) != len(self.src_words):
            raise DataError(
                f"{self.utt_id}: {len(self.word_spans)} spans for "
                f"{len(self.src_words)} words"
            )
        if len(self.src_tokens) != len(self.src_words):
            raise DataError(f"{self.utt_id}: src_tokens/src_words length mismatch")
        prev_end = -1
        for s, e in self.word_spans:
            if not (0 <= s <= e < T):
                raise DataError(f"{self.utt_id}: span ({s}, {e}) outside [0, {T})")
            if s <= prev_end:
                raise DataError(f"{self.utt_id}: overlapping or unsorted span ({s}, {e})")
            prev_end = e
        for toks in self.src_tokens:
            if not toks:
                raise DataError(f"{self.utt_id}: word with empty token list")
        return self


def write_manifest(path, utterances, feat_dir="feats"):
    """Write manifest JSONL next to a directory of feature containers."""
    path = Path(path)
    feat_root = path.parent / feat_dir
    feat_root.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            feat_path = feat_root / f"{utt.utt_id}.cstf"
            save_tensor(feat_path, utt.features.astype(np.float32))
            record = {
                "id": utt.utt_id,
                "feat": f"{feat_dir}/{utt.utt_id}.cstf",
                "src": utt.src_words,
                "spans": [[int(s), int(e)] for s, e in utt.word_spans],
                "src_tokens": [[int(t) for t in toks] for toks in utt.src_tokens],
            }
            if utt.tgt_words is not None:
                record["tgt"] = utt.tgt_words
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_manifest(path, max_frames=MAX_FRAMES):
    """Load and validate a manifest; logs a count of over-length discards."""
    path = Path(path)
    utterances = []
    discarded = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                features = load_tensor(path.parent / record["feat"])
                utt = Utterance(
                    utt_id=record["id"],
                    features=features,
                    src_words=list(record["src"]),
                    word_spans=[tuple(p) for p in record["spans"]],
                    src_tokens=[list(t) for t in record["src_tokens"]],
                    tgt_words=list(record["tgt"]) if "tgt" in record else None,
                )
                utt.validate()
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
            except DataError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if utt.num_frames > max_frames:
                discarded += 1
                continue
            utterances.append(utt)
    if discarded:
        log.warning("discarded %d utterances over %d frames", discarded, max_frames)
    return utterances


# ---------------------------------------------------------------------------
# vocabulary / fallback tokenization


@dataclass
class Vocab:
    """Id table with fixed specials; unit ids start after the specials."""

    tokens: list
    mode: str = "word"
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, words, mode="word"):
        if mode == "word":
            units = sorted(set(words))
        elif mode == "char":
            units = sorted({ch for w in words for ch in w})
        else:
            raise ValueError(f"unknown vocab mode {mode!r}")
        return cls(tokens=list(SPECIALS) + units, mode=mode)

    def id_of(self, token):
        return self._index.get(token, UNK_ID)

    def encode_word(self, word):
        return tokenize_fallback(word, self.mode, self)

    def encode_words(self, words):
        ids = []
        for w in words:
            ids.extend(self.encode_word(w))
        return ids

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#mode\t{self.mode}\n")
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if not header.startswith("#mode\t"):
                raise DataError(f"{path}: missing vocab mode header")
            mode = header.split("\t", 1)[1]
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens=tokens, mode=mode)


def tokenize_fallback(word, mode, vocab):
    """Whitespace/character fallback tokenizer: one id per char or per word."""
    if mode == "char":
        return [vocab._index.get(ch, UNK_ID) for ch in word]
    if mode == "word":
        return [vocab._index.get(word, UNK_ID)]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


# ---------------------------------------------------------------------------
# CMVN

CMVN_STD_FLOOR = 1e-10


def cmvn_stats(utterances):
    """Per-dimension mean/std over all frames of the training set (float64)."""
    frames = np.concatenate([u.features for u in utterances]).astype(np.float64)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std = np.maximum(std, CMVN_STD_FLOOR)
    return mean, std


def apply_cmvn(features, mean, std):
    return ((features.astype(np.float64) - mean) / std).astype(features.dtype)


def save_cmvn(path, mean, std):
    save_tensors(path, [mean.astype(np.float64), std.astype(np.float64)])


def load_cmvn(path):
    mean, std = load_tensors(path, 2)
    return mean, std


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthCorpus:
    utterances: list
    src_vocab: Vocab
    tgt_vocab: Vocab
    gold_lexicon: dict
    gold_alignments: dict
    prototypes: np.ndarray


def synth_corpus(
    seed,
    n_utts,
    vocab_src=20,
    vocab_tgt=None,
    span_len=(4, 8),
    noise=0.1,
    reorder=False,
    feat_dim=16,
    sent_len=(3, 8),
    asr_only_fraction=0.0,
):
    """Generate a fully reproducible toy speech-translation corpus.

    Each source word owns a fixed random prototype vector; its speech span
    is span_len frames of prototype + N(0, noise^2).  The target sentence
    maps each source word through a random bijection, optionally with local
    adjacent swaps so alignments are not strictly monotone.  Gold spans,
    alignments and the generating lexicon are returned for oracle tests.
    """
    if vocab_tgt is None:
        vocab_tgt = vocab_src
    if vocab_tgt < vocab_src:
        raise ValueError("target vocabulary must be at least as large as source")
    rng = np.random.default_rng(seed)
    src_words = [f"s{i:02d}" for i in range(vocab_src)]
    tgt_words = [f"t{i:02d}" for i in range(vocab_tgt)]
    mapping = rng.permutation(vocab_tgt)[:vocab_src]
    gold_lexicon = {src_words[i]: tgt_words[mapping[i]] for i in range(vocab_src)}
    prototypes = rng.normal(0.0, 1.0, size=(vocab_src, feat_dim))

    src_vocab = Vocab.build(src_words, mode="word")
    tgt_vocab = Vocab.build(tgt_words, mode="word")

    utterances = []
    gold_alignments = {}
    for n in range(n_utts):
        length = int(rng.integers(sent_len[0], sent_len[1] + 1))
        word_ids = rng.integers(0, vocab_src, size=length)
        spans = []
        frames = []
        cursor = 0
        for wid in word_ids:
            width = int(rng.integers(span_len[0], span_len[1] + 1))
            block = prototypes[wid][None, :].repeat(width, axis=0)
            if noise > 0:
                block = block + rng.normal(0.0, noise, size=block.shape)
            frames.append(block)
            spans.append((cursor, cursor + width - 1))
            cursor += width
        features = np.concatenate(frames).astype(np.float32)

        # target side: bijective mapping, optionally with local swaps
        items = [(gold_lexicon[src_words[wid]], i) for i, wid in enumerate(word_ids)]
        if reorder:
            j = 0
            while j + 1 < len(items):
                if rng.random() < 0.3:
                    items[j], items[j + 1] = items[j + 1], items[j]
                    j += 2
                else:
                    j += 1
        tgt_sentence = [w for w, _ in items]
        links = sorted((src_pos, tgt_pos) for tgt_pos, (_, src_pos) in enumerate(items))

        words = [src_words[wid] for wid in word_ids]
        utt_id = f"utt{n:05d}"
        is_triple = asr_only_fraction <= 0.0 or rng.random() >= asr_only_fraction
        utt = Utterance(
            utt_id=utt_id,
            features=features,
            src_words=words,
            word_spans=spans,
            src_tokens=[src_vocab.encode_word(w) for w in words],
            tgt_words=tgt_sentence if is_triple else None,
        )
        utterances.append(utt.validate())
        gold_alignments[utt_id] = links

    return SynthCorpus(
        utterances=utterances,
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        gold_lexicon=gold_lexicon,
        gold_alignments=gold_alignments,
        prototypes=prototypes,
    )


def write_synth(corpus, out_dir, n_dev=0):
    """Persist a synthetic corpus: train/dev manifests, vocabs and gold data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    utts = corpus.utterances
    if n_dev > 0:
        train, dev = utts[:-n_dev], utts[-n_dev:]
    else:
        train, dev = utts, []
    write_manifest(out / "train.jsonl", train)
    if dev:
        write_manifest(out / "dev.jsonl", dev)
    corpus.src_vocab.save(out / "vocab.src.txt")
    corpus.tgt_vocab.save(out / "vocab.tgt.txt")
    gold = {
        "lexicon": corpus.gold_lexicon,
        "alignments": {k: [list(p) for p in v] for k, v in sorted(corpus.gold_alignments.items())},
    }
    with open(out / "gold.json", "w", encoding="utf-8") as fh:
        json.dump(gold, fh, sort_keys=True, indent=0)
        fh.write("\n")
    return {"train": len(train), "dev": len(dev)}


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens, max_n):
    counts = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


def corpus_bleu(hypotheses, references, max_n=4):
    """Corpus-level case-insensitive BLEU, multi-bleu conventions.

    Geometric mean of modified n-gram precisions times the brevity penalty;
    no smoothing, so any empty n-gram match level yields 0.  Inputs are
    sentences (strings split on whitespace) or pre-split token lists.
    """
    if not hypotheses:
        raise DataError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise DataError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )

    def prep(sent):
        toks = sent.split() if isinstance(sent, str) else list(sent)
        return [t.lower() for t in toks]

    match = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = prep(hyp), prep(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        ref_counts = _ngram_counts(ref, max_n)
        hyp_counts = _ngram_counts(hyp, max_n)
        for gram, count in hyp_counts.items():
            n = len(gram)
            total[n - 1] += count
            match[n - 1] += min(count, ref_counts.get(gram, 0))
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for n in range(max_n):
        if match[n] == 0 or total[n] == 0:
            return 0.0
        log_precision += math.log(match[n] / total[n]) / max_n
    if hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)
