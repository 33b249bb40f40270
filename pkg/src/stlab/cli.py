"""Command-line surface for the training laboratory.

Every command validates its inputs, fails before touching the run
directory, prints a machine-readable JSON summary on stdout and keeps
human-readable logs on stderr.  Re-running a command with the same config
and seed reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import alignment as AL
from . import autodiff as ad
from . import data as D
from . import losses as LO
from . import model as MO
from . import training as TR

log = logging.getLogger("stlab")

RUN_ROOT_ENV = "STLAB_RUN_ROOT"

PAPER_DEFAULTS = dict(alpha=0.3, mask_ratio=0.15, beam=10, length_penalty=0.2,
                      avg_last=5, warmup=25000)


class CliError(ValueError):
    pass


def _resolve_run_dir(args):
    if args.run_dir:
        return Path(args.run_dir)
    root = os.environ.get(RUN_ROOT_ENV)
    if root:
        return Path(root) / "run"
    raise CliError(f"--run-dir required (or set {RUN_ROOT_ENV})")


def _load_vocabs(args, manifest_path):
    base = Path(manifest_path).parent
    src_path = Path(args.vocab_src) if args.vocab_src else base / "vocab.src.txt"
    tgt_path = Path(args.vocab_tgt) if args.vocab_tgt else base / "vocab.tgt.txt"
    for p in (src_path, tgt_path):
        if not p.exists():
            raise CliError(f"missing vocabulary file: {p}")
    return D.Vocab.load(src_path), D.Vocab.load(tgt_path)


def _model_config(args, feat_dim, src_vocab, tgt_vocab):
    overrides = MO.profile_overrides(args.profile)
    for name in ("d_model", "n_heads", "d_ff", "n_enc", "n_dec", "tap"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return MO.ModelConfig(feat_dim=feat_dim, src_vocab=src_vocab,
                          tgt_vocab=tgt_vocab, max_len=args.max_len, **overrides)


def _train_config(args):
    prof = TR.DESK_TRAIN if args.profile == "desk" else TR.PAPER_TRAIN
    warmup = args.warmup if args.warmup is not None else prof["warmup"]
    batch = args.batch_size if args.batch_size is not None else prof["batch_size"]
    epochs = tuple(args.epochs) if args.epochs else prof["epochs"]
    return TR.TrainConfig(
        seed=args.seed, batch_size=batch, warmup=warmup, lr_scale=args.lr_scale,
        alpha=args.alpha, mask_ratio=args.mask_ratio,
        specaugment=not args.no_specaugment,
        freq_width=prof["freq_width"], time_width=prof["time_width"],
        avg_last=args.avg_last, epochs=epochs,
    )


def _prepare_corpus(args, run_dir, manifests):
    """Load manifests and apply CMVN; stats persist in the run directory."""
    loaded = {name: D.read_manifest(path) for name, path in manifests.items() if path}
    stats_path = run_dir / "cmvn.cstf"
    if stats_path.exists():
        mean, std = D.load_cmvn(stats_path)
    else:
        mean, std = D.cmvn_stats(loaded["train"])
        run_dir.mkdir(parents=True, exist_ok=True)
        D.save_cmvn(stats_path, mean, std)
    for utts in loaded.values():
        for u in utts:
            u.features = D.apply_cmvn(u.features, mean, std)
    return loaded


def _read_assignments(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            out[record["id"]] = [list(words) for words in record["targets"]]
    return out


def _write_assignments(path, assignments):
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id in assignments:
            fh.write(json.dumps({"id": utt_id, "targets": assignments[utt_id]},
                                sort_keys=True) + "\n")


def _alignment_pipeline(utterances, iterations, smoothing):
    """EM + grow-diag-final on the translation-supervised subset, lexicon
    estimation, then target assignment for every utterance."""
    triples = [u for u in utterances if u.is_triple]
    if not triples:
        raise CliError("no translation-supervised utterances to align")
    pairs = [(u.src_words, u.tgt_words) for u in triples]
    symmetrized, forward, reverse = AL.align_corpus(pairs, iterations, smoothing)
    table = AL.build_lexicon(
        (u.src_words, u.tgt_words, links) for u, links in zip(triples, symmetrized)
    )
    links_by_id = {u.utt_id: links for u, links in zip(triples, symmetrized)}
    assignments = {}
    for u in utterances:
        if u.is_triple:
            assignments[u.utt_id] = AL.assign_targets(u, links=links_by_id[u.utt_id])
        else:
            assignments[u.utt_id] = AL.assign_targets(u, table=table)
    return assignments, table, symmetrized, forward, reverse, triples


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    corpus = D.synth_corpus(
        seed=args.seed, n_utts=args.n_train + args.n_dev, vocab_src=args.vocab_size,
        vocab_tgt=args.tgt_vocab_size, span_len=(args.span_min, args.span_max),
        noise=args.noise, reorder=args.reorder, feat_dim=args.feat_dim,
        sent_len=(args.sent_min, args.sent_max),
        asr_only_fraction=args.asr_only_fraction,
    )
    counts = D.write_synth(corpus, args.out, n_dev=args.n_dev)
    return {"command": "synth", "out": str(args.out), "seed": args.seed,
            "train": counts["train"], "dev": counts["dev"],
            "src_vocab": len(corpus.src_vocab), "tgt_vocab": len(corpus.tgt_vocab)}


def cmd_align(args):
    utts = D.read_manifest(args.manifest)
    triples = [u for u in utts if u.is_triple]
    if not triples:
        raise CliError(f"{args.manifest}: no utterances with targets to align")
    pairs = [(u.src_words, u.tgt_words) for u in triples]
    symmetrized, forward, reverse = AL.align_corpus(pairs, args.iterations,
                                                    args.smoothing)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    AL.write_alignments(out / "fwd.align", forward)
    AL.write_alignments(out / "rev.align", reverse)
    AL.write_alignments(out / "sym.align", symmetrized)
    with open(out / "aligned_ids.txt", "w", encoding="utf-8") as fh:
        for u in triples:
            fh.write(u.utt_id + "\n")
    return {"command": "align", "pairs": len(pairs), "out_dir": str(out),
            "iterations": args.iterations}


def cmd_build_lexicon(args):
    utts = {u.utt_id: u for u in D.read_manifest(args.manifest) if u.is_triple}
    align_dir = Path(args.alignments)
    ids = (align_dir / "aligned_ids.txt").read_text().split()
    links = AL.read_alignments(align_dir / "sym.align")
    if len(ids) != len(links):
        raise CliError("alignment files out of sync with aligned_ids.txt")
    table = AL.build_lexicon(
        (utts[i].src_words, utts[i].tgt_words, l) for i, l in zip(ids, links)
    )
    table.to_tsv(args.out)
    return {"command": "build-lexicon", "source_words": len(table.entries),
            "out": str(args.out)}


def cmd_assign_targets(args):
    utts = D.read_manifest(args.manifest)
    table = AL.LexiconTable.from_tsv(args.lexicon) if args.lexicon else None
    links_by_id = {}
    if args.alignments:
        align_dir = Path(args.alignments)
        ids = (align_dir / "aligned_ids.txt").read_text().split()
        links = AL.read_alignments(align_dir / "sym.align")
        links_by_id = dict(zip(ids, links))
    assignments = {}
    for u in utts:
        if u.is_triple and u.utt_id in links_by_id:
            assignments[u.utt_id] = AL.assign_targets(u, links=links_by_id[u.utt_id])
        else:
            assignments[u.utt_id] = AL.assign_targets(u, table=table)
    _write_assignments(args.out, assignments)
    return {"command": "assign-targets", "utterances": len(assignments),
            "out": str(args.out)}


def _phase_runner(args, run_dir, phase, init_params=None):
    manifests = {"train": args.train, "dev": args.dev}
    corpus = _prepare_corpus(args, run_dir, manifests)
    src_vocab, tgt_vocab = _load_vocabs(args, args.train)
    feat_dim = corpus["train"][0].feat_dim
    config = _model_config(args, feat_dim, len(src_vocab), len(tgt_vocab))
    cfg = _train_config(args)
    assignments = None
    if "fblt" in phase.objectives:
        if not args.assignments:
            raise CliError("--assignments required for word-translation training")
        assignments = _read_assignments(args.assignments)
    examples = TR.prepare_examples(corpus["train"], tgt_vocab, assignments)
    dev_examples = None
    if corpus.get("dev"):
        dev_examples = [ex for ex in TR.prepare_examples(corpus["dev"], tgt_vocab)
                        if ex.tgt_ids is not None]
    params = init_params
    if params is None:
        params = MO.ModelParams.init(config, seed=[cfg.seed, 0])
    if params.config != config:
        raise CliError("checkpoint config does not match the requested model")
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump({"mode": phase.kind, "model": config.to_dict(),
                   "train": cfg.to_dict()}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    metrics_path = run_dir / "metrics.jsonl"
    TR.transfer_params(params, phase, cfg.seed)
    lines = TR.run_phase(phase, params, examples, cfg, dev_examples=dev_examples,
                         run_dir=run_dir, metrics_path=metrics_path)
    MO.save_checkpoint(run_dir / f"{phase.kind}.ckpt", params)
    return params, config, cfg, lines


def cmd_pretrain(args):
    run_dir = _resolve_run_dir(args)
    epochs = tuple(args.epochs) if args.epochs else (
        TR.DESK_TRAIN if args.profile == "desk" else TR.PAPER_TRAIN)["epochs"]
    # build phase specs from a dummy config later; need vocab sizes first, so
    # construct the plan inside the runner via a placeholder then rebuild
    if args.multi3:
        kind, index = "multi", 0
    elif args.phase == 1:
        kind, index = "asr", 0
    elif args.phase == 2:
        kind, index = "adv", 1
    else:
        raise CliError("pretrain needs --phase 1, --phase 2 or --multi3")

    # the plan depends on the model config; resolve sizes up front
    src_vocab, tgt_vocab = _load_vocabs(args, args.train)
    probe = D.read_manifest(args.train)
    config = _model_config(args, probe[0].feat_dim, len(src_vocab), len(tgt_vocab))
    mode = "multi3" if kind == "multi" else "full"
    plan = TR.CurriculumPlan.for_mode(mode, config, epochs=epochs)
    phase = plan.phases[index]

    init = None
    if kind == "adv":
        prev = run_dir / "asr.ckpt"
        if not prev.exists():
            raise CliError(f"missing prerequisite checkpoint: {prev}")
        init = MO.load_checkpoint(prev)
    _, _, _, lines = _phase_runner(args, run_dir, phase, init_params=init)
    return {"command": "pretrain", "phase": phase.kind, "run_dir": str(run_dir),
            "epochs": phase.epochs, "final": lines[-1]}


def cmd_finetune(args):
    run_dir = _resolve_run_dir(args)
    epochs = tuple(args.epochs) if args.epochs else (
        TR.DESK_TRAIN if args.profile == "desk" else TR.PAPER_TRAIN)["epochs"]
    src_vocab, tgt_vocab = _load_vocabs(args, args.train)
    probe = D.read_manifest(args.train)
    config = _model_config(args, probe[0].feat_dim, len(src_vocab), len(tgt_vocab))

    st_epochs = args.st_epochs if args.st_epochs else epochs[2]
    if args.from_scratch:
        phase = TR.PhaseSpec("st", ("st",), st_epochs, "triples", ())
        init = None
    else:
        candidates = [run_dir / "adv.ckpt", run_dir / "multi.ckpt", run_dir / "asr.ckpt"]
        found = next((p for p in candidates if p.exists()), None)
        if found is None:
            raise CliError(
                f"missing prerequisite checkpoint: {candidates[0]} "
                "(run pretrain first or pass --from-scratch)"
            )
        init = MO.load_checkpoint(found)
        if found.name == "asr.ckpt":
            transfer = tuple(MO.encoder_prefixes(config, config.tap))
        else:
            transfer = tuple(MO.encoder_prefixes(config, config.n_enc))
        phase = TR.PhaseSpec("st", ("st",), st_epochs, "triples", transfer)
    params, config, cfg, lines = _phase_runner(args, run_dir, phase, init_params=init)

    ckpt_dir = run_dir / "checkpoints"
    tail = [ckpt_dir / f"st_ep{e:03d}.ckpt"
            for e in range(max(1, st_epochs - cfg.avg_last + 1), st_epochs + 1)]
    averaged = TR.average_checkpoints([p for p in tail if p.exists()])
    final = MO.ModelParams(
        averaged.config,
        {k: ad.DiffTensor(v.data.astype(np.float32))
         for k, v in averaged.tensors.items()},
    )
    MO.save_checkpoint(run_dir / "final.ckpt", final)
    return {"command": "finetune", "run_dir": str(run_dir), "epochs": st_epochs,
            "final": lines[-1], "averaged": len([p for p in tail if p.exists()])}


def cmd_decode(args):
    run_dir = _resolve_run_dir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "final.ckpt"
    if not ckpt.exists():
        raise CliError(f"missing checkpoint: {ckpt}")
    params = MO.load_checkpoint(ckpt)
    config = params.config
    utts = D.read_manifest(args.manifest)
    stats_path = run_dir / "cmvn.cstf"
    if not stats_path.exists():
        raise CliError(f"missing CMVN stats: {stats_path}")
    mean, std = D.load_cmvn(stats_path)
    _, tgt_vocab = _load_vocabs(args, args.manifest)
    beam = 1 if args.greedy else args.beam
    hyps = []
    for u in utts:
        feats = D.apply_cmvn(u.features, mean, std)
        ids = MO.beam_decode(feats, params, config, beam=beam,
                             length_penalty=args.length_penalty,
                             max_len=args.max_decode_len)
        hyps.append(" ".join(tgt_vocab.decode(ids)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    return {"command": "decode", "n": len(hyps), "beam": beam,
            "length_penalty": args.length_penalty, "out": str(out)}


def cmd_eval_bleu(args):
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    if args.ref:
        refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    elif args.manifest:
        utts = D.read_manifest(args.manifest)
        refs = [" ".join(u.tgt_words) for u in utts if u.is_triple]
    else:
        raise CliError("eval-bleu needs --ref or --manifest")
    bleu = D.corpus_bleu(hyps, refs)
    return {"command": "eval-bleu", "bleu": round(bleu, 4), "n": len(hyps)}


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    report = {}
    h = 1e-5

    def fd(forward, leaf, n_coords=2):
        root = forward()
        root.backward()
        worst = 0.0
        flat = leaf.data.reshape(-1)
        for c in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            idx = np.unravel_index(c, leaf.data.shape)
            keep = leaf.data[idx]
            leaf.data[idx] = keep + h
            up = float(forward().data)
            leaf.data[idx] = keep - h
            down = float(forward().data)
            leaf.data[idx] = keep
            numeric = (up - down) / (2 * h)
            analytic = float(leaf.grad[idx])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
        return worst

    cases = {
        "matmul": lambda: (lambda a, b: ad.sum_all(ad.matmul(a, b)),
                           [ad.tensor(rng.uniform(-2, 2, (3, 4))),
                            ad.tensor(rng.uniform(-2, 2, (4, 2)))]),
        "softmax": lambda: (lambda a: ad.sum_all(ad.mul(ad.softmax(a), a)),
                            [ad.tensor(rng.uniform(-2, 2, (3, 5)))]),
        "layer_norm": lambda: (lambda a: ad.sum_all(ad.mul(ad.layer_norm(a), a)),
                               [ad.tensor(rng.uniform(-2, 2, (4, 6)))]),
        "conv2d": lambda: (lambda x, w: ad.sum_all(ad.conv2d(x, w)),
                           [ad.tensor(rng.uniform(-2, 2, (2, 6, 5))),
                            ad.tensor(rng.uniform(-2, 2, (3, 2, 3, 3)))]),
        "mean_pool": lambda: (lambda hmat: ad.sum_all(ad.mean_pool(hmat, 1, 4)),
                              [ad.tensor(rng.uniform(-2, 2, (6, 3)))]),
        "ctc": lambda: (lambda lg: LO.ctc_loss(lg, [0, 1]),
                        [ad.tensor(rng.uniform(-2, 2, (5, 4)))]),
    }
    failures = 0
    for name, case in cases.items():
        worst = 0.0
        for _ in range(args.trials):
            build, leaves = case()
            root_fn = lambda: build(*leaves)
            for leaf in leaves:
                worst = max(worst, fd(root_fn, leaf))
                for l in leaves:
                    l.grad = None
        report[name] = worst
        if worst >= 1e-4:
            failures += 1
    summary = {"command": "gradcheck", "trials": args.trials,
               "max_rel_err": {k: float(f"{v:.3e}") for k, v in report.items()},
               "ok": failures == 0}
    if failures:
        raise CliError(f"gradient check failed: {summary['max_rel_err']}")
    return summary


def cmd_ablate(args):
    run_dir = _resolve_run_dir(args)
    corpus = _prepare_corpus(args, run_dir, {"train": args.train, "dev": args.dev})
    src_vocab, tgt_vocab = _load_vocabs(args, args.train)
    config = _model_config(args, corpus["train"][0].feat_dim,
                           len(src_vocab), len(tgt_vocab))
    cfg = _train_config(args)
    plan = TR.CurriculumPlan.for_mode(args.mode, config, epochs=cfg.epochs)
    assignments = None
    if any("fblt" in p.objectives for p in plan.phases):
        assignments, table, symmetrized, _, _, triples = _alignment_pipeline(
            corpus["train"], args.iterations, args.smoothing)
        AL.write_alignments(run_dir / "sym.align", symmetrized)
        table.to_tsv(run_dir / "lexicon.tsv")
        _write_assignments(run_dir / "assignments.jsonl", assignments)
    _, summary = TR.run_curriculum(plan, config, corpus["train"],
                                   corpus.get("dev"), tgt_vocab, cfg,
                                   assignments=assignments, run_dir=run_dir)
    summary["command"] = "ablate"
    summary["run_dir"] = str(run_dir)
    return summary


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p):
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--n-enc", dest="n_enc", type=int)
    p.add_argument("--n-dec", dest="n_dec", type=int)
    p.add_argument("--tap", type=int)
    p.add_argument("--max-len", dest="max_len", type=int, default=512)
    p.add_argument("--vocab-src", dest="vocab_src")
    p.add_argument("--vocab-tgt", dest="vocab_tgt")


def _add_train_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=PAPER_DEFAULTS["alpha"])
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float,
                   default=PAPER_DEFAULTS["mask_ratio"])
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr-scale", dest="lr_scale", type=float, default=1.0)
    p.add_argument("--avg-last", dest="avg_last", type=int,
                   default=PAPER_DEFAULTS["avg_last"])
    p.add_argument("--epochs", type=int, nargs=3, metavar=("E1", "E2", "E3"))
    p.add_argument("--no-specaugment", action="store_true")
    p.add_argument("--assignments")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stlab",
        description="Curriculum pre-training laboratory for speech translation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", dest="n_train", type=int, default=500)
    p.add_argument("--n-dev", dest="n_dev", type=int, default=50)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=30)
    p.add_argument("--tgt-vocab-size", dest="tgt_vocab_size", type=int, default=None)
    p.add_argument("--feat-dim", dest="feat_dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--reorder", action="store_true")
    p.add_argument("--span-min", dest="span_min", type=int, default=4)
    p.add_argument("--span-max", dest="span_max", type=int, default=8)
    p.add_argument("--sent-min", dest="sent_min", type=int, default=3)
    p.add_argument("--sent-max", dest="sent_max", type=int, default=8)
    p.add_argument("--asr-only-fraction", dest="asr_only_fraction", type=float,
                   default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="word-align the translation subset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--smoothing", type=float, default=AL.DEFAULT_SMOOTHING)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("build-lexicon", help="estimate the lexical table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alignments", required=True,
                   help="directory produced by the align command")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_lexicon)

    p = sub.add_parser("assign-targets", help="per-word target assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alignments", help="directory produced by the align command")
    p.add_argument("--lexicon", help="TSV lexical table for ASR-only data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assign_targets)

    p = sub.add_parser("pretrain", help="run a pre-training phase")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--phase", type=int, choices=[1, 2])
    group.add_argument("--multi3", action="store_true")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="translation fine-tuning")
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true")
    p.add_argument("--st-epochs", dest="st_epochs", type=int)
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="beam decoding of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--beam", type=int, default=PAPER_DEFAULTS["beam"])
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--length-penalty", dest="length_penalty", type=float,
                   default=PAPER_DEFAULTS["length_penalty"])
    p.add_argument("--max-decode-len", dest="max_decode_len", type=int, default=32)
    p.add_argument("--vocab-src", dest="vocab_src")
    p.add_argument("--vocab-tgt", dest="vocab_tgt")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-bleu", help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval_bleu)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="full pipeline for one curriculum mode")
    p.add_argument("--mode", required=True, choices=list(TR.MODES))
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--smoothing", type=float, default=AL.DEFAULT_SMOOTHING)
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except (CliError, D.DataError, AL.ConfigurationError, MO.InputError,
            LO.SpanError, FileNotFoundError) as exc:
        log.error("%s", exc)
        print(json.dumps({"error": str(exc)}, sort_keys=True))
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
