import io
import json

import numpy as np
import pytest

from stlab import data as D


# ---------------------------------------------------------------------------
# container


def test_tensor_container_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    for shape in [(), (5,), (3, 4), (2, 3, 4), (2, 2, 2, 2)]:
        for dtype in (np.float32, np.float64):
            arr = rng.normal(size=shape).astype(dtype)
            buf = io.BytesIO()
            D.write_tensor(buf, arr)
            buf.seek(0)
            back = D.read_tensor(buf)
            assert back.dtype == arr.dtype
            assert np.array_equal(back, arr)


def test_container_bad_magic_detected():
    buf = io.BytesIO(b"XXXX" + b"\x00" * 16)
    with pytest.raises(D.ContainerError):
        D.read_tensor(buf)


def test_container_truncated_payload_detected():
    buf = io.BytesIO()
    D.write_tensor(buf, np.ones((4, 4), dtype=np.float32))
    raw = buf.getvalue()[:-8]
    with pytest.raises(D.ContainerError):
        D.read_tensor(io.BytesIO(raw))


def test_container_truncated_dims_detected():
    buf = io.BytesIO()
    D.write_tensor(buf, np.ones(3, dtype=np.float32))
    raw = buf.getvalue()[:9]
    with pytest.raises(D.ContainerError):
        D.read_tensor(io.BytesIO(raw))


# ---------------------------------------------------------------------------
# manifests


def make_utt(utt_id="u0", T=12, F=4, tgt=None):
    feats = np.arange(T * F, dtype=np.float32).reshape(T, F)
    return D.Utterance(
        utt_id=utt_id,
        features=feats,
        src_words=["a", "b"],
        word_spans=[(0, 4), (5, 11)],
        src_tokens=[[3], [4]],
        tgt_words=tgt,
    )


def test_manifest_round_trip(tmp_path):
    utts = [make_utt("u0"), make_utt("u1", tgt=["x", "y"])]
    D.write_manifest(tmp_path / "m.jsonl", utts)
    back = D.read_manifest(tmp_path / "m.jsonl")
    assert len(back) == 2
    for orig, loaded in zip(utts, back):
        assert loaded.utt_id == orig.utt_id
        assert np.array_equal(loaded.features, orig.features)
        assert loaded.src_words == orig.src_words
        assert loaded.word_spans == orig.word_spans
        assert loaded.src_tokens == orig.src_tokens
        assert loaded.tgt_words == orig.tgt_words


def test_manifest_tgt_absent_means_asr_only(tmp_path):
    D.write_manifest(tmp_path / "m.jsonl", [make_utt()])
    utt = D.read_manifest(tmp_path / "m.jsonl")[0]
    assert not utt.is_triple


def test_manifest_overlapping_spans_rejected_with_line_number(tmp_path):
    utt = make_utt()
    utt.word_spans = [(0, 5), (5, 11)]
    feat_dir = tmp_path / "feats"
    feat_dir.mkdir()
    D.save_tensor(feat_dir / "u0.cstf", utt.features)
    record = {
        "id": "u0",
        "feat": "feats/u0.cstf",
        "src": utt.src_words,
        "spans": [[0, 5], [5, 11]],
        "src_tokens": utt.src_tokens,
    }
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(D.ManifestError) as exc:
        D.read_manifest(path)
    assert ":1:" in str(exc.value)


def test_manifest_span_out_of_range_rejected(tmp_path):
    feat_dir = tmp_path / "feats"
    feat_dir.mkdir()
    D.save_tensor(feat_dir / "u0.cstf", np.zeros((4, 2), dtype=np.float32))
    record = {
        "id": "u0",
        "feat": "feats/u0.cstf",
        "src": ["a"],
        "spans": [[0, 4]],
        "src_tokens": [[3]],
    }
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(D.ManifestError):
        D.read_manifest(path)


def test_manifest_discards_overlong_utterances(tmp_path):
    long_utt = D.Utterance(
        utt_id="long",
        features=np.zeros((3001, 2), dtype=np.float32),
        src_words=["a"],
        word_spans=[(0, 5)],
        src_tokens=[[3]],
    )
    D.write_manifest(tmp_path / "m.jsonl", [make_utt("ok", F=2), long_utt])
    loaded = D.read_manifest(tmp_path / "m.jsonl")
    assert [u.utt_id for u in loaded] == ["ok"]


# ---------------------------------------------------------------------------
# vocab / tokenizer


def test_tokenize_char_mode():
    vocab = D.Vocab.build(["ab"], mode="char")
    ids = D.tokenize_fallback("ab", "char", vocab)
    assert ids == [vocab.id_of("a"), vocab.id_of("b")]
    assert len(ids) == 2 and ids[0] != ids[1]


def test_tokenize_word_mode_single_id():
    vocab = D.Vocab.build(["hello", "world"], mode="word")
    assert len(D.tokenize_fallback("hello", "word", vocab)) == 1


def test_tokenize_unknown_maps_to_unk():
    vocab = D.Vocab.build(["ab"], mode="char")
    assert D.tokenize_fallback("az", "char", vocab)[1] == D.UNK_ID


def test_vocab_save_load(tmp_path):
    vocab = D.Vocab.build(["b", "a", "c"], mode="word")
    vocab.save(tmp_path / "v.txt")
    back = D.Vocab.load(tmp_path / "v.txt")
    assert back.tokens == vocab.tokens
    assert back.mode == "word"
    assert back.id_of("b") == vocab.id_of("b")


# ---------------------------------------------------------------------------
# CMVN


def test_cmvn_normalizes_training_corpus():
    rng = np.random.default_rng(1)
    utts = [make_utt(f"u{i}") for i in range(4)]
    for u in utts:
        u.features = rng.normal(3.0, 2.5, size=(50, 4)).astype(np.float32)
    mean, std = D.cmvn_stats(utts)
    normalized = np.concatenate([D.apply_cmvn(u.features, mean, std) for u in utts])
    assert np.abs(normalized.mean(axis=0)).max() < 1e-6
    assert np.abs(normalized.std(axis=0) - 1.0).max() < 1e-6


def test_cmvn_constant_dimension_clamped():
    utts = [make_utt()]
    utts[0].features = np.full((20, 3), 7.0, dtype=np.float32)
    mean, std = D.cmvn_stats(utts)
    assert np.all(std == D.CMVN_STD_FLOOR)
    out = D.apply_cmvn(utts[0].features, mean, std)
    assert np.all(out == 0.0)


def test_cmvn_idempotent_within_tolerance():
    rng = np.random.default_rng(2)
    utts = [make_utt(f"u{i}") for i in range(3)]
    for u in utts:
        u.features = rng.normal(size=(100, 4)).astype(np.float32)
    mean, std = D.cmvn_stats(utts)
    for u in utts:
        u.features = D.apply_cmvn(u.features, mean, std)
    mean2, std2 = D.cmvn_stats(utts)
    again = D.apply_cmvn(utts[0].features, mean2, std2)
    assert np.abs(again - utts[0].features).max() < 1e-6


def test_cmvn_stats_file_round_trip(tmp_path):
    mean = np.array([1.0, 2.0, 3.0])
    std = np.array([0.5, 1.0, 2.0])
    D.save_cmvn(tmp_path / "cmvn.cstf", mean, std)
    m, s = D.load_cmvn(tmp_path / "cmvn.cstf")
    assert np.array_equal(m, mean) and np.array_equal(s, std)


# ---------------------------------------------------------------------------
# synthetic corpus


def test_synth_zero_noise_gives_constant_spans():
    corpus = D.synth_corpus(seed=5, n_utts=3, vocab_src=6, noise=0.0, feat_dim=4)
    utt = corpus.utterances[0]
    for s, e in utt.word_spans:
        block = utt.features[s : e + 1]
        assert np.all(block == block[0])


def test_synth_monotone_gold_alignment_without_reorder():
    corpus = D.synth_corpus(seed=6, n_utts=5, vocab_src=6, reorder=False)
    for utt in corpus.utterances:
        links = corpus.gold_alignments[utt.utt_id]
        assert links == [(i, i) for i in range(len(utt.src_words))]


def test_synth_reproducible_from_seed(tmp_path):
    a = D.synth_corpus(seed=7, n_utts=4, vocab_src=5, reorder=True)
    b = D.synth_corpus(seed=7, n_utts=4, vocab_src=5, reorder=True)
    for ua, ub in zip(a.utterances, b.utterances):
        assert ua.utt_id == ub.utt_id
        assert np.array_equal(ua.features, ub.features)
        assert ua.src_words == ub.src_words
        assert ua.tgt_words == ub.tgt_words
    assert a.gold_lexicon == b.gold_lexicon


def test_synth_write_outputs(tmp_path):
    corpus = D.synth_corpus(seed=8, n_utts=6, vocab_src=5)
    counts = D.write_synth(corpus, tmp_path, n_dev=2)
    assert counts == {"train": 4, "dev": 2}
    assert (tmp_path / "train.jsonl").exists()
    assert (tmp_path / "dev.jsonl").exists()
    assert (tmp_path / "gold.json").exists()
    train = D.read_manifest(tmp_path / "train.jsonl")
    assert len(train) == 4
    vocab = D.Vocab.load(tmp_path / "vocab.src.txt")
    assert vocab.tokens[: len(D.SPECIALS)] == list(D.SPECIALS)


def test_synth_asr_only_fraction_strips_targets():
    corpus = D.synth_corpus(seed=9, n_utts=40, vocab_src=5, asr_only_fraction=0.5)
    n_asr = sum(1 for u in corpus.utterances if not u.is_triple)
    assert 0 < n_asr < 40


# ---------------------------------------------------------------------------
# BLEU


def reference_bleu(hyps, refs, max_n=4):
    """Independent BLEU oracle: straightforward multi-bleu re-derivation
    using dict-of-list n-gram counting (distinct code path from the module)."""
    import math

    def grams(toks, n):
        out = {}
        for i in range(len(toks) - n + 1):
            key = " ".join(toks[i : i + n])
            out[key] = out.get(key, 0) + 1
        return out

    hyps = [h.lower().split() if isinstance(h, str) else [t.lower() for t in h] for h in hyps]
    refs = [r.lower().split() if isinstance(r, str) else [t.lower() for t in r] for r in refs]
    logs = []
    for n in range(1, max_n + 1):
        num = den = 0
        for h, r in zip(hyps, refs):
            hg, rg = grams(h, n), grams(r, n)
            den += sum(hg.values())
            num += sum(min(c, rg.get(g, 0)) for g, c in hg.items())
        if num == 0 or den == 0:
            return 0.0
        logs.append(math.log(num / den))
    c = sum(len(h) for h in hyps)
    r = sum(len(r_) for r_ in refs)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / max_n)


def test_bleu_perfect_match_is_100():
    sents = ["the cat sat on the mat", "a b c d e"]
    assert D.corpus_bleu(sents, sents) == pytest.approx(100.0)


def test_bleu_brevity_penalty_hand_case():
    # all precisions 1, BP = exp(1 - 5/4) -> 77.88 to two decimals
    bleu = D.corpus_bleu(["a b c d"], ["a b c d e"])
    assert round(bleu, 2) == 77.88


def test_bleu_case_insensitive():
    assert D.corpus_bleu(["The Cat SAT down"], ["the cat sat down"]) == pytest.approx(100.0)


def test_bleu_zero_for_corpus_shorter_than_max_n():
    # multi-bleu convention: no 4-grams at all -> unsmoothed BLEU is 0
    assert D.corpus_bleu(["the cat"], ["the cat"]) == 0.0


def test_bleu_zero_when_no_match():
    assert D.corpus_bleu(["x y z w"], ["a b c d"]) == 0.0


def test_bleu_empty_hypothesis_set_rejected():
    with pytest.raises(D.DataError):
        D.corpus_bleu([], [])


def test_bleu_matches_independent_oracle_on_random_corpus():
    rng = np.random.default_rng(10)
    words = ["alpha", "beta", "gamma", "delta", "eps", "zeta"]
    hyps, refs = [], []
    for _ in range(20):
        n = int(rng.integers(3, 12))
        ref = [words[rng.integers(len(words))] for _ in range(n)]
        hyp = list(ref)
        for i in range(len(hyp)):
            if rng.random() < 0.3:
                hyp[i] = words[rng.integers(len(words))]
        if rng.random() < 0.3:
            hyp = hyp[: max(1, len(hyp) - 2)]
        hyps.append(" ".join(hyp))
        refs.append(" ".join(ref))
    assert D.corpus_bleu(hyps, refs) == pytest.approx(reference_bleu(hyps, refs), abs=0.01)
