"""Training objectives and masking procedures.

Covers the transcription loss (CTC + decoder cross-entropy), the two
advanced pre-training losses over word-aligned speech segments (masked
word prediction at the mid encoder tap, bilingual word translation at the
top tap), the translation cross-entropy, SpecAugment, and the optional
masked-filterbank L1 reconstruction loss.

Word spans are inclusive frame indices; hidden-state indices are half-open
after the fixed conv downsampling factor of 4.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad

DOWNSAMPLE = 4


class SpanError(ValueError):
    pass


class CtcInfeasibleError(ValueError):
    """Label sequence cannot fit into the available frames."""


class CtcNumericalError(ArithmeticError):
    """CTC forward produced a non-finite value."""


@dataclass
class WordSpan:
    """A word's speech extent: inclusive frame span plus its subword ids."""

    word_index: int
    start_frame: int
    end_frame: int
    tokens: list
    masked: bool = False

    def validate(self, num_frames=None):
        if self.start_frame < 0 or self.end_frame < self.start_frame:
            raise SpanError(f"bad span ({self.start_frame}, {self.end_frame})")
        if num_frames is not None and self.end_frame >= num_frames:
            raise SpanError(
                f"span ({self.start_frame}, {self.end_frame}) outside {num_frames} frames"
            )
        if not self.tokens:
            raise SpanError(f"word {self.word_index} has no tokens")
        return self


def spans_from_utterance(utt):
    return [
        WordSpan(i, s, e, list(toks)).validate(utt.num_frames)
        for i, ((s, e), toks) in enumerate(zip(utt.word_spans, utt.src_tokens))
    ]


@dataclass
class SoftTarget:
    """Uniform distribution over a small support of vocabulary ids."""

    support: list
    weight: float

    @classmethod
    def from_tokens(cls, tokens):
        seen = []
        for t in tokens:
            if t not in seen:
                seen.append(t)
        if not seen:
            raise SpanError("soft target needs a nonempty support")
        return cls(support=seen, weight=1.0 / len(seen))


def soft_target_for_assignment(target_words, vocab):
    """Union of the assigned words' subword tokens, uniformly weighted.

    Returns None for an empty assignment (zero loss contribution).
    """
    tokens = []
    for word in target_words:
        tokens.extend(vocab.encode_word(word))
    if not tokens:
        return None
    return SoftTarget.from_tokens(tokens)


# ---------------------------------------------------------------------------
# frame index mapping


def frame_to_hidden_span(start_frame, end_frame, hidden_len=None):
    """Map an inclusive frame span to a half-open hidden-state span.

    lo = floor(start/4), hi = ceil(end/4) pushed up to at least lo+1 so the
    span is never empty; with hidden_len given both ends are clamped and a
    span entirely beyond the hidden states is an error.
    """
    if start_frame < 0 or end_frame < start_frame:
        raise SpanError(f"bad frame span ({start_frame}, {end_frame})")
    lo = start_frame // DOWNSAMPLE
    hi = max(-(-end_frame // DOWNSAMPLE), lo + 1)
    if hidden_len is not None:
        if lo >= hidden_len:
            raise SpanError(
                f"span ({start_frame}, {end_frame}) maps beyond {hidden_len} hidden states"
            )
        hi = min(hi, hidden_len)
    return lo, hi


# ---------------------------------------------------------------------------
# word masking


def select_and_mask(features, spans, ratio, rng):
    """Mask whole words for the masked-word prediction task.

    Each word is selected independently with probability ``ratio``; if the
    draw selects none, one word is forced uniformly.  Masked frames are
    replaced by the per-dimension mean of the whole utterance.  Returns the
    masked copy of the features and spans with updated ``masked`` flags.
    """
    if not spans:
        raise SpanError("utterance has no word spans")
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    draws = rng.random(len(spans))
    selected = draws < ratio
    if not selected.any():
        selected[rng.integers(len(spans))] = True
    fill = features.mean(axis=0)
    masked = features.copy()
    out_spans = []
    for span, flag in zip(spans, selected):
        if flag:
            masked[span.start_frame : span.end_frame + 1] = fill
        out_spans.append(replace(span, masked=bool(flag)))
    return masked, out_spans


def mask_random_frames(features, ratio, rng):
    """Mask a fraction of frames with the per-dimension mean (reconstruction
    pre-training); returns the masked features and the boolean cell mask."""
    T = features.shape[0]
    flags = rng.random(T) < ratio
    if not flags.any():
        flags[rng.integers(T)] = True
    masked = features.copy()
    masked[flags] = features.mean(axis=0)
    cell_mask = np.zeros(features.shape, dtype=bool)
    cell_mask[flags] = True
    return masked, cell_mask


# ---------------------------------------------------------------------------
# CTC


def ctc_loss(logits, labels, blank=None):
    """Negative log-probability of the label sequence under CTC collapsing.

    ``logits`` is an (L, V+1) node with the blank as the last column unless
    given explicitly.  The usual forward/backward recursions run in the log
    domain; the gradient w.r.t. the logits is softmax minus the state
    posterior.
    """
    data = logits.data
    L, width = data.shape
    if blank is None:
        blank = width - 1
    labels = [int(t) for t in labels]
    if any(t < 0 or t >= width or t == blank for t in labels):
        raise ValueError(f"label ids must be in [0, {width}) and not the blank ({blank})")
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    needed = len(labels) + repeats
    if needed > L:
        raise CtcInfeasibleError(
            f"label of length {len(labels)} (+{repeats} repeat blanks) needs "
            f"{needed} frames, only {L} available"
        )

    ext = [blank]
    for t in labels:
        ext.extend((t, blank))
    S = len(ext)
    log_probs = data - data.max(axis=1, keepdims=True)
    log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=1, keepdims=True))

    neg_inf = -np.inf
    alpha = np.full((L, S), neg_inf)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, L):
        for s in range(S):
            best = alpha[t - 1, s]
            if s >= 1:
                best = np.logaddexp(best, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                best = np.logaddexp(best, alpha[t - 1, s - 2])
            alpha[t, s] = best + log_probs[t, ext[s]]

    total = alpha[L - 1, S - 1]
    if S > 1:
        total = np.logaddexp(total, alpha[L - 1, S - 2])
    if not np.isfinite(total):
        raise CtcNumericalError("non-finite CTC path probability")

    beta = np.full((L, S), neg_inf)
    beta[L - 1, S - 1] = 0.0
    if S > 1:
        beta[L - 1, S - 2] = 0.0
    for t in range(L - 2, -1, -1):
        for s in range(S):
            best = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < S:
                best = np.logaddexp(best, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                best = np.logaddexp(best, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = best

    out = ad.DiffTensor(np.asarray(-total, dtype=data.dtype), (logits,))

    def backward_fn(g):
        with np.errstate(invalid="ignore"):
            occupancy = alpha + beta - total
        gamma = np.zeros_like(data)
        for s, symbol in enumerate(ext):
            column = occupancy[:, s]
            finite = np.isfinite(column)
            gamma[finite, symbol] += np.exp(column[finite])
        grad = np.exp(log_probs) - gamma
        if logits.grad is None:
            logits.grad = np.zeros_like(data)
        logits.grad += g * grad

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# scalar loss combinations


def asr_loss(ctc, ce, alpha=0.3):
    """Weighted transcription objective: alpha*ctc + (1-alpha)*ce."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if isinstance(ctc, ad.DiffTensor) or isinstance(ce, ad.DiffTensor):
        return ad.add(ad.scale(ctc, alpha), ad.scale(ce, 1.0 - alpha))
    return alpha * ctc + (1.0 - alpha) * ce


def adv_loss(fmlm, fblt):
    """Unweighted sum of the two advanced-course losses."""
    if isinstance(fmlm, ad.DiffTensor) or isinstance(fblt, ad.DiffTensor):
        return ad.add(fmlm, fblt)
    return fmlm + fblt


def kl_soft_loss(p, q):
    """KL(q || p) against a uniform soft target: sum_w (1/n)(log(1/n) - log p[w]).

    ``p`` is a 1-D probability node; zero probabilities are floored at 1e-12
    inside the log.  Result is >= 0 and 0 exactly when p realizes q.
    """
    log_p = ad.log(p)
    picked = ad.take(log_p, q.support)
    cross = ad.scale(ad.sum_all(picked), -q.weight)
    entropy = q.weight * np.log(q.weight) * len(q.support)
    return ad.add(cross, float(entropy))


def _span_kl(hidden, span, weight_node, target, hidden_len):
    lo, hi = frame_to_hidden_span(span.start_frame, span.end_frame, hidden_len)
    pooled = ad.mean_pool(hidden, lo, hi)
    logits = ad.linear(ad.reshape(pooled, (1, -1)), weight_node)
    p = ad.reshape(ad.softmax(logits, axis=-1), (-1,))
    return kl_soft_loss(p, target)


def fmlm_loss(hidden_mid, spans, projection, targets=None):
    """Masked-word prediction loss at the mid encoder tap.

    Sums the soft-target KL over the masked spans only; each span pools its
    hidden rows and projects to the source vocabulary.  ``targets`` may
    override the per-span soft targets (defaults to each word's tokens).
    """
    if not any(s.masked for s in spans):
        raise SpanError("masked-word loss needs at least one masked span")
    if targets is None:
        targets = [SoftTarget.from_tokens(s.tokens) if s.masked else None for s in spans]
    hidden_len = hidden_mid.data.shape[0]
    total = None
    for span, target in zip(spans, targets):
        if not span.masked or target is None:
            continue
        term = _span_kl(hidden_mid, span, projection, target, hidden_len)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise SpanError("no masked span has a soft target")
    return total


def fblt_loss(hidden_top, spans, targets, projection):
    """Bilingual word translation loss at the top encoder tap.

    Computed over every span regardless of its masked flag; spans whose
    target assignment is empty (``targets[i]`` is None) contribute zero.
    """
    if len(targets) != len(spans):
        raise SpanError(f"{len(targets)} targets for {len(spans)} spans")
    hidden_len = hidden_top.data.shape[0]
    total = None
    for span, target in zip(spans, targets):
        if target is None:
            continue
        term = _span_kl(hidden_top, span, projection, target, hidden_len)
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.constant(0.0, hidden_top)
    return total


def st_loss(probs, target_ids):
    """Token-summed negative log-likelihood of the target sequence.

    ``probs`` holds one distribution per prefix position (teacher forcing);
    ``target_ids`` includes the end-of-sentence token.
    """
    if probs.data.shape[0] != len(target_ids):
        raise SpanError(
            f"{probs.data.shape[0]} distributions for {len(target_ids)} target tokens"
        )
    picked = ad.pick(ad.log(probs), target_ids)
    return ad.scale(ad.sum_all(picked), -1.0)


# ---------------------------------------------------------------------------
# feature augmentation / reconstruction


def specaugment(features, freq_width=30, n_freq_masks=2, time_width=40, n_time_masks=2, rng=None):
    """Zero out random frequency and time bands (widths ~ U[0, width], clamped)."""
    if rng is None:
        raise ValueError("specaugment needs an rng")
    out = features.copy()
    T, F = out.shape
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, freq_width + 1))
        width = min(width, F)
        if width == 0:
            continue
        start = int(rng.integers(0, F - width + 1))
        out[:, start : start + width] = 0.0
    for _ in range(n_time_masks):
        width = int(rng.integers(0, time_width + 1))
        width = min(width, T)
        if width == 0:
            continue
        start = int(rng.integers(0, T - width + 1))
        out[start : start + width, :] = 0.0
    return out


def recon_l1_loss(predictions, original, mask):
    """Mean absolute error over masked feature cells only."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return ad.constant(0.0, predictions)
    diff = ad.sub(predictions, ad.constant(original, predictions))
    masked = ad.mul(ad.abs_(diff), ad.constant(mask.astype(original.dtype), predictions))
    return ad.scale(ad.sum_all(masked), 1.0 / count)
