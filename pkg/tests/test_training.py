import json
import math

import numpy as np
import pytest

from stlab import autodiff as ad
from stlab import data as D
from stlab import model as M
from stlab import training as T
from stlab.alignment import ConfigurationError


# ---------------------------------------------------------------------------
# schedule


def test_noam_strictly_increasing_through_warmup():
    values = [T.noam_lr(s, warmup=50, d_model=16) for s in range(1, 51)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_noam_peak_and_halving_exact():
    for warmup in (4, 25, 400, 25000):
        for d_model in (1, 32, 256):
            peak = T.noam_lr(warmup, warmup, d_model, scale=1.3)
            assert T.noam_lr(4 * warmup, warmup, d_model, scale=1.3) == peak / 2


def test_noam_plugin_value():
    assert T.noam_lr(4, warmup=4, d_model=1, scale=1.0) == 0.5


def test_noam_rejects_step_zero():
    with pytest.raises(ValueError):
        T.noam_lr(0, 4, 1)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_keeps_params():
    t = ad.DiffTensor(np.array([1.0, -2.0]))
    t.grad = np.zeros(2)
    state = T.OptimizerState()
    T.adam_step({"w": t}, state, lr=0.1)
    assert np.array_equal(t.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    # bias correction makes |update| ~ lr regardless of gradient scale
    for g in (1e-3, 1.0, 50.0):
        t = ad.DiffTensor(np.array([0.0]))
        t.grad = np.array([g])
        state = T.OptimizerState()
        T.adam_step({"w": t}, state, lr=0.01)
        assert abs(abs(float(t.data[0])) - 0.01) < 1e-6


def test_adam_skips_tensors_without_grad():
    t = ad.DiffTensor(np.array([3.0]))
    state = T.OptimizerState()
    T.adam_step({"w": t}, state, lr=0.5)
    assert t.data[0] == 3.0


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(0)
        t = ad.DiffTensor(rng.normal(size=4))
        state = T.OptimizerState()
        for step in range(20):
            t.grad = np.sin(t.data + step)
            T.adam_step({"w": t}, state, lr=0.05)
            t.grad = None
        return t.data.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# checkpoint averaging


def tiny_model(seed=0, dtype=np.float32):
    config = M.ModelConfig(feat_dim=6, src_vocab=7, tgt_vocab=7, d_model=8,
                           n_heads=2, d_ff=16, n_enc=2, n_dec=1, tap=1)
    return M.ModelParams.init(config, seed=seed, dtype=dtype), config


def test_average_identical_checkpoints_idempotent(tmp_path):
    params, _ = tiny_model(seed=1)
    paths = []
    for i in range(3):
        p = tmp_path / f"c{i}.ckpt"
        M.save_checkpoint(p, params)
        paths.append(p)
    avg = T.average_checkpoints(paths)
    for name in params.names():
        assert np.allclose(avg[name].data, params[name].data, atol=0)


def test_average_two_checkpoints_midpoint(tmp_path):
    a, config = tiny_model(seed=2)
    b = a.copy()
    for t in a.tensors.values():
        t.data[:] = 0.0
    for t in b.tensors.values():
        t.data[:] = 2.0
    M.save_checkpoint(tmp_path / "a.ckpt", a)
    M.save_checkpoint(tmp_path / "b.ckpt", b)
    avg = T.average_checkpoints([tmp_path / "a.ckpt", tmp_path / "b.ckpt"])
    for name in avg.names():
        assert np.all(avg[name].data == 1.0)


def test_average_matches_independent_mean(tmp_path):
    paths = []
    stored = []
    for i in range(5):
        params, _ = tiny_model(seed=10 + i)
        p = tmp_path / f"c{i}.ckpt"
        M.save_checkpoint(p, params)
        paths.append(p)
        stored.append({n: params[n].data.copy() for n in params.names()})
    avg = T.average_checkpoints(paths)
    for name in avg.names():
        independent = sum(s[name].astype(np.float64) for s in stored) / 5.0
        assert np.abs(avg[name].data - independent).max() < 1e-12


def test_average_rejects_mismatched_configs(tmp_path):
    a, _ = tiny_model()
    other_config = M.ModelConfig(feat_dim=6, src_vocab=7, tgt_vocab=7, d_model=8,
                                 n_heads=2, d_ff=16, n_enc=3, n_dec=1, tap=1)
    b = M.ModelParams.init(other_config, seed=0)
    M.save_checkpoint(tmp_path / "a.ckpt", a)
    M.save_checkpoint(tmp_path / "b.ckpt", b)
    with pytest.raises(ValueError):
        T.average_checkpoints([tmp_path / "a.ckpt", tmp_path / "b.ckpt"])


# ---------------------------------------------------------------------------
# plans


def test_plan_full_structure():
    _, config = tiny_model()
    plan = T.CurriculumPlan.for_mode("full", config, epochs=(3, 2, 4))
    assert [p.kind for p in plan.phases] == ["asr", "adv", "st"]
    assert plan.phases[0].transfer == ()
    assert "conv." in plan.phases[1].transfer
    assert f"enc{config.tap - 1}." in plan.phases[1].transfer
    assert f"enc{config.tap}." not in plan.phases[1].transfer
    assert f"enc{config.n_enc - 1}." in plan.phases[2].transfer
    assert plan.phases[2].data == "triples"


def test_plan_minus_phase2_is_asr_pretrain_pipeline():
    _, config = tiny_model()
    plan = T.CurriculumPlan.for_mode("minus_phase2", config, epochs=(3, 2, 4))
    assert [p.kind for p in plan.phases] == ["asr", "st"]
    assert plan.phases[1].transfer == tuple(M.encoder_prefixes(config, config.tap))


def test_plan_multi3_single_joint_phase():
    _, config = tiny_model()
    plan = T.CurriculumPlan.for_mode("multi3", config, epochs=(3, 2, 4))
    assert plan.phases[0].kind == "multi"
    assert set(plan.phases[0].objectives) == {"asr", "fmlm", "fblt"}
    assert plan.phases[0].epochs == 5


def test_plan_scratch_budget_matches_full():
    _, config = tiny_model()
    full = T.CurriculumPlan.for_mode("full", config, epochs=(3, 2, 4))
    scratch = T.CurriculumPlan.for_mode("scratch", config, epochs=(3, 2, 4))
    # with an all-triples corpus both plans take the same number of steps
    assert T.plan_total_steps(full, 40, 40, 16) == T.plan_total_steps(scratch, 40, 40, 16)


def test_plan_unknown_mode_rejected():
    _, config = tiny_model()
    with pytest.raises(ConfigurationError):
        T.CurriculumPlan.for_mode("bogus", config)


# ---------------------------------------------------------------------------
# phase running on a tiny synthetic corpus


def tiny_corpus(n=20, seed=0, vocab=6):
    corpus = D.synth_corpus(seed=seed, n_utts=n, vocab_src=vocab, noise=0.05,
                            feat_dim=6, sent_len=(2, 4))
    mean, std = D.cmvn_stats(corpus.utterances)
    for u in corpus.utterances:
        u.features = D.apply_cmvn(u.features, mean, std)
    return corpus


def gold_assignments(corpus):
    return {
        u.utt_id: [[corpus.gold_lexicon[w]] for w in u.src_words]
        for u in corpus.utterances
    }


def small_config(corpus):
    return M.ModelConfig(feat_dim=6, src_vocab=len(corpus.src_vocab),
                         tgt_vocab=len(corpus.tgt_vocab), d_model=8, n_heads=2,
                         d_ff=16, n_enc=2, n_dec=1, tap=1, max_len=32)


def test_phase_transfer_preserves_bottom_blocks_bit_exact():
    corpus = tiny_corpus()
    config = small_config(corpus)
    cfg = T.TrainConfig(seed=0, batch_size=8, warmup=10, epochs=(1, 1, 1),
                        specaugment=False)
    plan = T.CurriculumPlan.for_mode("full", config, epochs=(1, 1, 1))
    params = M.ModelParams.init(config, seed=[cfg.seed, 0])
    examples = T.prepare_examples(corpus.utterances, corpus.tgt_vocab,
                                  gold_assignments(corpus))
    T.transfer_params(params, plan.phases[0], cfg.seed)
    T.run_phase(plan.phases[0], params, examples, cfg)
    snapshot = {n: params[n].data.copy() for n in params.names()}
    T.transfer_params(params, plan.phases[1], cfg.seed)
    for name in params.names():
        kept = any(name.startswith(p) for p in plan.phases[1].transfer)
        same = np.array_equal(params[name].data, snapshot[name])
        kind = M.param_shapes(config)[name][1]
        if kept:
            assert same, f"{name} should transfer bit-exactly"
        elif kind == "matrix" or kind == "conv" or kind == "embedding":
            assert not same, f"{name} should be freshly initialized"


def test_run_phase_requires_assignments_for_fblt():
    corpus = tiny_corpus()
    config = small_config(corpus)
    cfg = T.TrainConfig(seed=0, batch_size=8, warmup=10)
    plan = T.CurriculumPlan.for_mode("full", config, epochs=(1, 1, 1))
    params = M.ModelParams.init(config, seed=0)
    examples = T.prepare_examples(corpus.utterances, corpus.tgt_vocab)  # no targets
    with pytest.raises(ConfigurationError):
        T.run_phase(plan.phases[1], params, examples, cfg)


def test_run_phase_training_loss_decreases():
    corpus = tiny_corpus(n=24)
    config = small_config(corpus)
    cfg = T.TrainConfig(seed=1, batch_size=8, warmup=20, specaugment=False)
    phase = T.PhaseSpec("asr", ("asr",), 5, "all", ())
    params = M.ModelParams.init(config, seed=[1, 0])
    examples = T.prepare_examples(corpus.utterances, corpus.tgt_vocab)
    lines = T.run_phase(phase, params, examples, cfg)
    assert lines[-1]["loss"] < lines[0]["loss"]


def test_run_curriculum_writes_run_dir_and_is_deterministic(tmp_path):
    corpus = tiny_corpus(n=16)
    config = small_config(corpus)
    cfg = T.TrainConfig(seed=2, batch_size=8, warmup=10, epochs=(1, 1, 2),
                        specaugment=False, avg_last=2)
    plan = T.CurriculumPlan.for_mode("full", config, epochs=cfg.epochs)
    assignments = gold_assignments(corpus)

    def run(where):
        return T.run_curriculum(plan, config, corpus.utterances[:12],
                                corpus.utterances[12:], corpus.tgt_vocab, cfg,
                                assignments=assignments, run_dir=where)

    _, summary1 = run(tmp_path / "r1")
    _, summary2 = run(tmp_path / "r2")
    m1 = (tmp_path / "r1" / "metrics.jsonl").read_bytes()
    m2 = (tmp_path / "r2" / "metrics.jsonl").read_bytes()
    assert m1 == m2 and len(m1) > 0
    assert (tmp_path / "r1" / "config.json").exists()
    assert (tmp_path / "r1" / "final.ckpt").exists()
    assert (tmp_path / "r1" / "st.ckpt").exists()
    lines = [json.loads(l) for l in m1.decode().splitlines()]
    assert [l["phase"] for l in lines] == ["asr", "adv", "st", "st"]
    assert "dev_loss" in lines[-1]
    assert summary1["dev_loss"] == summary2["dev_loss"]
    # final.ckpt averages the last avg_last st checkpoints
    avg = T.average_checkpoints([
        tmp_path / "r1" / "checkpoints" / "st_ep001.ckpt",
        tmp_path / "r1" / "checkpoints" / "st_ep002.ckpt",
    ])
    final = M.load_checkpoint(tmp_path / "r1" / "final.ckpt")
    for name in final.names():
        assert np.allclose(final[name].data,
                           avg[name].data.astype(np.float32), atol=0)
