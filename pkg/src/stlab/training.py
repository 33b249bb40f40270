"""The curriculum itself: phase orchestration, parameter transfer between
phases, the warmup/inverse-sqrt learning-rate schedule, Adam, per-epoch
checkpointing with final checkpoint averaging, and the ablation modes.

Phases hand parameters forward through an explicit transfer set: everything
outside it is freshly re-drawn from the seeded initializer at the phase
boundary, so e.g. the translation phase always starts with a new decoder.
Determinism contract: given one (seed, plan, corpus) triple, reruns produce
bit-identical metrics and checkpoints.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as LO
from . import model as MO
from .data import BOS_ID, EOS_ID
from .alignment import ConfigurationError

log = logging.getLogger(__name__)

PHASE_SEED_TAGS = {"asr": 1, "adv": 2, "st": 3, "multi": 4}

MODES = ("full", "minus_fmlm", "minus_fblt", "minus_phase1", "minus_phase2",
         "multi3", "scratch")

_TOP_PREFIXES = None  # computed per config


def noam_lr(step, warmup, d_model, scale=1.0):
    """Warmup then inverse-sqrt decay; peaks at step == warmup.

    Uses an explicit branch rather than min() so that lr(4*warmup) is
    exactly half of lr(warmup) in floating point.
    """
    if step < 1:
        raise ValueError("step starts at 1")
    if step >= warmup:
        factor = 1.0 / math.sqrt(step)
    else:
        factor = step / (warmup * math.sqrt(warmup))
    return scale / math.sqrt(d_model) * factor


@dataclass
class OptimizerState:
    """Adam moments plus the schedule bookkeeping; step resets per phase."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup: int = 400
    scale: float = 1.0


def adam_step(tensors, state, lr):
    """One bias-corrected Adam update over every tensor carrying a gradient."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, tensor in tensors.items():
        g = tensor.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.data.dtype)


def average_checkpoints(paths):
    """Elementwise mean of the named tensors of k checkpoints (float64)."""
    if not paths:
        raise ValueError("need at least one checkpoint")
    first = MO.load_checkpoint(paths[0])
    sums = {name: first[name].data.astype(np.float64) for name in first.names()}
    for path in paths[1:]:
        other = MO.load_checkpoint(path)
        if other.config != first.config:
            raise ValueError(f"{path}: checkpoint config differs")
        for name in first.names():
            sums[name] += other[name].data.astype(np.float64)
    k = len(paths)
    tensors = {name: ad.DiffTensor(total / k) for name, total in sums.items()}
    return MO.ModelParams(first.config, tensors)


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class PhaseSpec:
    kind: str          # asr | adv | st | multi
    objectives: tuple  # subset of ("asr", "fmlm", "fblt", "st")
    epochs: int
    data: str          # "all" | "triples"
    transfer: tuple    # parameter-name prefixes kept from the previous phase

    @property
    def seed_tag(self):
        return PHASE_SEED_TAGS[self.kind]

    @property
    def depth_is_full(self):
        return self.kind != "asr"


@dataclass(frozen=True)
class CurriculumPlan:
    mode: str
    phases: tuple

    @classmethod
    def for_mode(cls, mode, config, epochs=(10, 5, 10)):
        """Build the phase list for the full curriculum or an ablation."""
        e1, e2, e3 = epochs
        bottom = tuple(MO.encoder_prefixes(config, config.tap))
        full_enc = tuple(MO.encoder_prefixes(config, config.n_enc))

        asr = PhaseSpec("asr", ("asr",), e1, "all", ())
        adv = PhaseSpec("adv", ("fmlm", "fblt"), e2, "all", bottom)
        st = PhaseSpec("st", ("st",), e3, "triples", full_enc)

        if mode == "full":
            phases = (asr, adv, st)
        elif mode == "minus_fmlm":
            phases = (asr, PhaseSpec("adv", ("fblt",), e2, "all", bottom), st)
        elif mode == "minus_fblt":
            phases = (asr, PhaseSpec("adv", ("fmlm",), e2, "all", bottom), st)
        elif mode == "minus_phase1":
            phases = (PhaseSpec("adv", ("fmlm", "fblt"), e2, "all", ()), st)
        elif mode == "minus_phase2":
            phases = (asr, PhaseSpec("st", ("st",), e3, "triples", bottom))
        elif mode == "multi3":
            phases = (
                PhaseSpec("multi", ("asr", "fmlm", "fblt"), e1 + e2, "all", ()),
                st,
            )
        elif mode == "scratch":
            phases = (PhaseSpec("st", ("st",), e1 + e2 + e3, "triples", ()),)
        else:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
        return cls(mode=mode, phases=phases)


def top_level_prefixes(config):
    out = ["conv."]
    out += [f"enc{i}." for i in range(config.n_enc)]
    out += ["enc_norm_mid.", "enc_norm_top.", "ctc.", "fmlm.", "fblt.", "recon.",
            "dec_asr.", "dec_st."]
    return out


# ---------------------------------------------------------------------------
# training configuration / data


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    warmup: int = 400
    lr_scale: float = 1.0
    alpha: float = 0.3
    mask_ratio: float = 0.15
    specaugment: bool = True
    freq_width: int = 30
    n_freq_masks: int = 2
    time_width: int = 40
    n_time_masks: int = 2
    avg_last: int = 5
    epochs: tuple = (10, 5, 10)

    def to_dict(self):
        d = asdict(self)
        d["epochs"] = list(self.epochs)
        return d


DESK_TRAIN = dict(batch_size=16, warmup=400, epochs=(10, 5, 10),
                  freq_width=4, time_width=8)
PAPER_TRAIN = dict(batch_size=64, warmup=25000, epochs=(50, 20, 50),
                   freq_width=30, time_width=40)


@dataclass
class TrainExample:
    utt_id: str
    features: np.ndarray
    spans: list
    src_ids: list
    tgt_ids: list | None
    fblt_targets: list | None


def prepare_examples(utterances, tgt_vocab, assignments=None):
    """Precompute spans, token streams and soft targets per utterance."""
    examples = []
    for utt in utterances:
        spans = LO.spans_from_utterance(utt)
        src_ids = [t for toks in utt.src_tokens for t in toks]
        tgt_ids = tgt_vocab.encode_words(utt.tgt_words) if utt.is_triple else None
        targets = None
        if assignments is not None and utt.utt_id in assignments:
            targets = [
                LO.soft_target_for_assignment(words, tgt_vocab)
                for words in assignments[utt.utt_id]
            ]
        examples.append(TrainExample(utt.utt_id, utt.features, spans, src_ids,
                                     tgt_ids, targets))
    return examples


# ---------------------------------------------------------------------------
# per-utterance objectives


def _sequence_ce(memory, prefix_ids, target_ids, params, config, which):
    probs = MO.decode_forward(memory, prefix_ids, params, config, which=which)
    loss = LO.st_loss(probs, target_ids)
    acc = float(np.mean(np.argmax(probs.data, axis=1) == np.asarray(target_ids)))
    return loss, acc


def _asr_objective(example, params, config, cfg, rng, train, stats):
    feats = example.features
    if train and cfg.specaugment:
        feats = LO.specaugment(feats, cfg.freq_width, cfg.n_freq_masks,
                               cfg.time_width, cfg.n_time_masks, rng)
    enc = MO.encode(feats, params, config, depth=config.tap, train=train, rng=rng)
    ce, acc = _sequence_ce(enc.hidden_mid, [BOS_ID] + example.src_ids,
                           example.src_ids + [EOS_ID], params, config, "asr")
    stats.add("asr_acc", acc)
    try:
        ctc = LO.ctc_loss(MO.ctc_logits(enc.hidden_mid, params), example.src_ids)
        return LO.asr_loss(ctc, ce, cfg.alpha)
    except LO.CtcInfeasibleError:
        stats.count("ctc_skipped")
        return ce


def _masked_objectives(example, objectives, params, config, cfg, rng, train, stats):
    masked_feats, spans = LO.select_and_mask(example.features, example.spans,
                                             cfg.mask_ratio, rng)
    enc = MO.encode(masked_feats, params, config, depth=None, train=train, rng=rng)
    terms = []
    if "asr" in objectives:
        ce, acc = _sequence_ce(enc.hidden_mid, [BOS_ID] + example.src_ids,
                               example.src_ids + [EOS_ID], params, config, "asr")
        stats.add("asr_acc", acc)
        try:
            ctc = LO.ctc_loss(MO.ctc_logits(enc.hidden_mid, params), example.src_ids)
            terms.append(LO.asr_loss(ctc, ce, cfg.alpha))
        except LO.CtcInfeasibleError:
            stats.count("ctc_skipped")
            terms.append(ce)
    if "fmlm" in objectives:
        terms.append(LO.fmlm_loss(enc.hidden_mid, spans, params["fmlm.w"]))
        stats.add("fmlm_acc", _span_accuracy(enc.hidden_mid, spans, params["fmlm.w"],
                                             [LO.SoftTarget.from_tokens(s.tokens) for s in spans],
                                             masked_only=True))
    if "fblt" in objectives:
        terms.append(LO.fblt_loss(enc.hidden_top, spans, example.fblt_targets,
                                  params["fblt.w"]))
        acc = _span_accuracy(enc.hidden_top, spans, params["fblt.w"],
                             example.fblt_targets, masked_only=False)
        if acc is not None:
            stats.add("fblt_acc", acc)
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def _span_accuracy(hidden, spans, projection, targets, masked_only):
    """Fraction of spans whose argmax projected token lies in the target
    support (plain numpy on the already-computed forward values)."""
    hits = []
    hidden_len = hidden.data.shape[0]
    for span, target in zip(spans, targets):
        if masked_only and not span.masked:
            continue
        if target is None:
            continue
        lo, hi = LO.frame_to_hidden_span(span.start_frame, span.end_frame, hidden_len)
        scores = hidden.data[lo:hi].mean(axis=0) @ projection.data
        hits.append(1.0 if int(np.argmax(scores)) in target.support else 0.0)
    if not hits:
        return None
    return float(np.mean(hits))


def _st_objective(example, params, config, cfg, rng, train, stats):
    enc = MO.encode(example.features, params, config, depth=None, train=train, rng=rng)
    loss, acc = _sequence_ce(enc.hidden_top, [BOS_ID] + example.tgt_ids,
                             example.tgt_ids + [EOS_ID], params, config, "st")
    stats.add("st_acc", acc)
    return loss


def utterance_loss(phase, example, params, config, cfg, rng, stats, train=True):
    if phase.kind == "asr":
        return _asr_objective(example, params, config, cfg, rng, train, stats)
    if phase.kind in ("adv", "multi"):
        return _masked_objectives(example, phase.objectives, params, config, cfg,
                                  rng, train, stats)
    if phase.kind == "st":
        return _st_objective(example, params, config, cfg, rng, train, stats)
    raise ConfigurationError(f"unknown phase kind {phase.kind!r}")


class _Stats:
    def __init__(self):
        self.sums = {}
        self.counts = {}

    def add(self, key, value):
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def count(self, key):
        self.counts[key] = self.counts.get(key, 0) + 1

    def means(self):
        return {k: self.sums[k] / self.counts[k] for k in self.sums}


# ---------------------------------------------------------------------------
# evaluation


def evaluate_st(params, config, examples):
    """Teacher-forced dev loss and token accuracy (no gradients kept)."""
    losses = []
    accs = []
    for ex in examples:
        enc = MO.encode(ex.features, params, config, depth=None)
        probs = MO.decode_forward(enc.hidden_top, [BOS_ID] + ex.tgt_ids, params,
                                  config, which="st")
        target = ex.tgt_ids + [EOS_ID]
        losses.append(float(LO.st_loss(probs, target).data))
        accs.append(float(np.mean(np.argmax(probs.data, axis=1) == np.asarray(target))))
    return float(np.mean(losses)), float(np.mean(accs))


# ---------------------------------------------------------------------------
# phase runner


def _validate_phase_data(phase, data):
    if not data:
        raise ConfigurationError(f"phase {phase.kind!r} has no usable utterances")
    for ex in data:
        if not ex.spans:
            raise ConfigurationError(f"{ex.utt_id}: no word spans")
        if "fblt" in phase.objectives and ex.fblt_targets is None:
            raise ConfigurationError(
                f"{ex.utt_id}: word-translation targets missing; run the "
                "alignment/assignment pipeline first"
            )
        if "st" in phase.objectives and ex.tgt_ids is None:
            raise ConfigurationError(f"{ex.utt_id}: target sentence missing")


def run_phase(phase, params, examples, cfg, dev_examples=None, run_dir=None,
              metrics_path=None):
    """Train one curriculum phase in place; returns per-epoch metric dicts.

    The optimizer (and so the warmup counter) is fresh per phase.  One
    checkpoint per epoch is written under ``run_dir/checkpoints``.
    """
    config = params.config
    data = [ex for ex in examples
            if phase.data == "all" or ex.tgt_ids is not None]
    _validate_phase_data(phase, data)
    rng = np.random.default_rng([cfg.seed, phase.seed_tag])
    opt = OptimizerState(warmup=cfg.warmup, scale=cfg.lr_scale)
    lines = []
    for epoch in range(1, phase.epochs + 1):
        order = rng.permutation(len(data))
        stats = _Stats()
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            total = None
            for ex in batch:
                part = utterance_loss(phase, ex, params, config, cfg, rng, stats)
                total = part if total is None else ad.add(total, part)
            total = ad.scale(total, 1.0 / len(batch))
            total.backward()
            lr = noam_lr(opt.step + 1, opt.warmup, config.d_model, opt.scale)
            adam_step(params.tensors, opt, lr)
            params.zero_grads()
            epoch_loss += float(total.data)
            n_batches += 1
        line = {"phase": phase.kind, "epoch": epoch,
                "loss": epoch_loss / n_batches, "steps": opt.step}
        line.update({k: round(v, 6) for k, v in stats.means().items()})
        if "ctc_skipped" in stats.counts:
            line["ctc_skipped"] = stats.counts["ctc_skipped"]
        if dev_examples is not None and phase.kind == "st":
            dev_loss, dev_acc = evaluate_st(params, config, dev_examples)
            line["dev_loss"] = dev_loss
            line["dev_acc"] = dev_acc
        lines.append(line)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        if run_dir is not None:
            ckpt_dir = Path(run_dir) / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            MO.save_checkpoint(ckpt_dir / f"{phase.kind}_ep{epoch:03d}.ckpt", params)
        log.info("phase %s epoch %d: %s", phase.kind, epoch, line)
    return lines


def transfer_params(params, phase, seed):
    """Apply the phase-boundary policy: keep the transfer set, re-draw the rest."""
    keep = phase.transfer
    fresh = [p for p in top_level_prefixes(params.config)
             if not any(p == k or p.startswith(k) for k in keep)]
    params.reinit(fresh, seed=[seed, phase.seed_tag, 7])
    return params


def run_curriculum(plan, config, train_utts, dev_utts, tgt_vocab, cfg,
                   assignments=None, run_dir=None, params=None):
    """Run every phase of a plan; returns (params, summary dict)."""
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {"mode": plan.mode, "model": config.to_dict(),
                    "train": cfg.to_dict()}
        with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
            json.dump(snapshot, fh, sort_keys=True, indent=2)
            fh.write("\n")
        metrics_path = run_dir / "metrics.jsonl"
        metrics_path.write_text("")
    examples = prepare_examples(train_utts, tgt_vocab, assignments)
    dev_examples = None
    if dev_utts:
        dev_examples = [ex for ex in prepare_examples(dev_utts, tgt_vocab)
                        if ex.tgt_ids is not None]
    if params is None:
        params = MO.ModelParams.init(config, seed=[cfg.seed, 0])
    summary = {"mode": plan.mode, "phases": []}
    for phase in plan.phases:
        transfer_params(params, phase, cfg.seed)
        lines = run_phase(phase, params, examples, cfg, dev_examples=dev_examples,
                          run_dir=run_dir, metrics_path=metrics_path)
        summary["phases"].append({"kind": phase.kind, "epochs": phase.epochs,
                                  "final": lines[-1]})
        if run_dir is not None:
            MO.save_checkpoint(run_dir / f"{phase.kind}.ckpt", params)
    if run_dir is not None:
        last = plan.phases[-1]
        ckpt_dir = run_dir / "checkpoints"
        tail = [ckpt_dir / f"{last.kind}_ep{e:03d}.ckpt"
                for e in range(max(1, last.epochs - cfg.avg_last + 1), last.epochs + 1)]
        averaged = average_checkpoints([p for p in tail if p.exists()])
        final = MO.ModelParams(
            averaged.config,
            {k: ad.DiffTensor(v.data.astype(np.float32))
             for k, v in averaged.tensors.items()},
        )
        MO.save_checkpoint(run_dir / "final.ckpt", final)
    if dev_examples:
        dev_loss, dev_acc = evaluate_st(params, config, dev_examples)
        summary["dev_loss"] = dev_loss
        summary["dev_acc"] = dev_acc
    return params, summary


def plan_total_steps(plan, n_all, n_triples, batch_size):
    """Optimizer steps a plan will take (for budget-matched baselines)."""
    total = 0
    for phase in plan.phases:
        n = n_all if phase.data == "all" else n_triples
        total += math.ceil(n / batch_size) * phase.epochs
    return total
