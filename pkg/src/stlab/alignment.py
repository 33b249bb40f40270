"""Word alignment and bilingual lexicon machinery.

Replaces the usual external alignment toolchain with an in-repo pipeline:
a uniform-alignment lexical translation model trained by EM in both
directions, argmax directional alignments, grow-diag-final symmetrization,
link-count lexicon estimation, and per-utterance target-word assignment.
All of it operates on plain word strings; alignments are (src_index,
tgt_index) pairs.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass

log = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 1e-6

NEIGHBORHOOD = ((-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


class ConfigurationError(ValueError):
    pass


def ibm1_em(pairs, iterations=10, smoothing=DEFAULT_SMOOTHING):
    """EM training of lexical translation probabilities p(tgt | src).

    Returns (probs, log_likelihoods) where probs[src][tgt] is normalized per
    source word and log_likelihoods has one entry per iteration, evaluated
    under the parameters entering that iteration's E-step; the sequence is
    non-decreasing.  ``smoothing`` is a floor applied when *querying*
    unseen pairs (see ``lookup``), keeping the M-step exact so the EM
    monotonicity guarantee holds.  Empty sentence pairs are skipped with a
    warning count.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pairs = list(pairs)
    clean = [(s, t) for s, t in pairs if s and t]
    if not clean:
        raise ValueError("empty corpus")
    if len(clean) < len(pairs):
        log.warning("skipped %d empty sentence pairs", len(pairs) - len(clean))

    tgt_vocab = {w for _, t in clean for w in t}
    uniform = 1.0 / len(tgt_vocab)
    probs = defaultdict(lambda: defaultdict(lambda: uniform))
    log_likelihoods = []

    for _ in range(iterations):
        counts = defaultdict(lambda: defaultdict(float))
        totals = defaultdict(float)
        ll = 0.0
        for src, tgt in clean:
            for t_word in tgt:
                scores = [probs[s_word][t_word] for s_word in src]
                denom = sum(scores)
                ll += math.log(denom / len(src))
                for s_word, score in zip(src, scores):
                    posterior = score / denom
                    counts[s_word][t_word] += posterior
                    totals[s_word] += posterior
        log_likelihoods.append(ll)
        probs = defaultdict(lambda: defaultdict(float))
        for s_word, t_counts in counts.items():
            total = totals[s_word]
            for t_word, count in t_counts.items():
                probs[s_word][t_word] = count / total
    return {s: dict(t) for s, t in probs.items()}, log_likelihoods


def lookup(probs, src_word, tgt_word, smoothing=DEFAULT_SMOOTHING):
    """Translation probability with a floor for unseen pairs/words."""
    table = probs.get(src_word)
    if table is None:
        return smoothing
    return max(table.get(tgt_word, 0.0), smoothing)


def viterbi_align(probs, src_words, tgt_words, smoothing=DEFAULT_SMOOTHING):
    """Align each target word to its argmax source word.

    Returns a set of (src_index, tgt_index) links, one per target word.
    Ties break toward the lower source index.  For the reverse direction,
    call with the roles swapped and flip the returned pairs.
    """
    links = set()
    for j, t_word in enumerate(tgt_words):
        best_i, best_score = 0, -1.0
        for i, s_word in enumerate(src_words):
            score = lookup(probs, s_word, t_word, smoothing)
            if score > best_score:
                best_i, best_score = i, score
        links.add((best_i, j))
    return links


def align_corpus(pairs, iterations=10, smoothing=DEFAULT_SMOOTHING):
    """Both-direction EM + argmax alignment + symmetrization per pair.

    Returns (symmetrized, forward, reverse): lists of link lists aligned
    with the input pair order.
    """
    pairs = list(pairs)
    fwd_probs, _ = ibm1_em(pairs, iterations, smoothing)
    rev_probs, _ = ibm1_em([(t, s) for s, t in pairs], iterations, smoothing)
    forward, reverse, symmetrized = [], [], []
    for src, tgt in pairs:
        f = viterbi_align(fwd_probs, src, tgt, smoothing)
        r = {(i, j) for j, i in viterbi_align(rev_probs, tgt, src, smoothing)}
        forward.append(sorted(f))
        reverse.append(sorted(r))
        symmetrized.append(grow_diag_final(f, r, len(src), len(tgt)))
    return symmetrized, forward, reverse


def grow_diag_final(forward, reverse, src_len, tgt_len):
    """Symmetrize two directional alignments (grow-diag, then final).

    Starts from the intersection, grows along the 8-connected neighborhood
    within the union while either endpoint is unaligned, then adds union
    links whose endpoints are both unaligned (forward links first).  The
    result is sorted and always between intersection and union.
    """
    fwd, rev = set(forward), set(reverse)
    for i, j in fwd | rev:
        if not (0 <= i < src_len and 0 <= j < tgt_len):
            raise ValueError(
                f"link ({i}, {j}) outside sentence lengths ({src_len}, {tgt_len})"
            )
    union = fwd | rev
    links = fwd & rev
    src_aligned = {i for i, _ in links}
    tgt_aligned = {j for _, j in links}

    changed = True
    while changed:
        changed = False
        for i, j in sorted(links):
            for di, dj in NEIGHBORHOOD:
                cand = (i + di, j + dj)
                if cand in links or cand not in union:
                    continue
                if cand[0] not in src_aligned or cand[1] not in tgt_aligned:
                    links.add(cand)
                    src_aligned.add(cand[0])
                    tgt_aligned.add(cand[1])
                    changed = True

    for candidates in (sorted(fwd), sorted(rev)):
        for i, j in candidates:
            if i not in src_aligned and j not in tgt_aligned:
                links.add((i, j))
                src_aligned.add(i)
                tgt_aligned.add(j)
    return sorted(links)


# ---------------------------------------------------------------------------
# lexicon


@dataclass
class LexiconTable:
    """Per source word, target words with probabilities (descending)."""

    entries: dict

    def prob(self, src_word, tgt_word):
        for t, p in self.entries.get(src_word, ()):
            if t == tgt_word:
                return p
        return 0.0

    def argmax(self, src_word):
        options = self.entries.get(src_word)
        return options[0][0] if options else None

    def source_words(self):
        return sorted(self.entries)

    def validate(self):
        for src, options in self.entries.items():
            total = sum(p for _, p in options)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"probabilities for {src!r} sum to {total}")
            if any(p <= 0 for _, p in options):
                raise ValueError(f"non-positive probability under {src!r}")
        return self

    def to_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for src in sorted(self.entries):
                for tgt, p in self.entries[src]:
                    fh.write(f"{src}\t{tgt}\t{p!r}\n")

    @classmethod
    def from_tsv(cls, path):
        entries = defaultdict(list)
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                src, tgt, p = line.rstrip("\n").split("\t")
                entries[src].append((tgt, float(p)))
        return cls(entries=dict(entries)).validate()


def build_lexicon(aligned_triples):
    """Estimate the lexical table from symmetrized alignment counts.

    ``aligned_triples`` yields (src_words, tgt_words, links).  Probability
    of a target word given a source word is its link count normalized by
    the source word's total links; source words with no links are absent.
    """
    counts = defaultdict(lambda: defaultdict(int))
    for src_words, tgt_words, links in aligned_triples:
        for i, j in links:
            counts[src_words[i]][tgt_words[j]] += 1
    entries = {}
    for src, t_counts in counts.items():
        total = sum(t_counts.values())
        ranked = sorted(t_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        entries[src] = [(t, c / total) for t, c in ranked]
    return LexiconTable(entries=entries).validate()


def assign_targets(utterance, links=None, table=None):
    """Target words for each source word of one utterance.

    Translation-supervised utterances use their sentence links: the i-th
    entry lists the target words linked to source word i (duplicates
    dropped, target order kept).  Transcription-only utterances need the
    lexicon table and get the singleton argmax, or the empty list for
    unseen words (those later contribute zero loss).
    """
    words = utterance.src_words
    if utterance.tgt_words is not None and links is not None:
        per_word = [[] for _ in words]
        for i, j in sorted(links, key=lambda link: (link[0], link[1])):
            tgt = utterance.tgt_words[j]
            if tgt not in per_word[i]:
                per_word[i].append(tgt)
        return per_word
    if table is None:
        raise ConfigurationError(
            f"{utterance.utt_id}: lexicon table required for utterances without "
            "a target sentence"
        )
    assignment = []
    for word in words:
        best = table.argmax(word)
        assignment.append([best] if best is not None else [])
    return assignment


# ---------------------------------------------------------------------------
# Pharaoh text format


def format_links(links):
    return " ".join(f"{i}-{j}" for i, j in sorted(links))


def parse_links(line):
    links = []
    for part in line.split():
        i, j = part.split("-")
        links.append((int(i), int(j)))
    return links


def write_alignments(path, link_lists):
    with open(path, "w", encoding="utf-8") as fh:
        for links in link_lists:
            fh.write(format_links(links) + "\n")


def read_alignments(path):
    with open(path, encoding="utf-8") as fh:
        return [parse_links(line.rstrip("\n")) for line in fh]
