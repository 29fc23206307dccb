import math

import numpy as np
import pytest
from scipy.stats import chisquare

from sacnmt import autodiff as ad
from sacnmt.config import ConfigError, TrainConfig
from sacnmt.corpus import SynthTaskSpec, batch_iter, split_corpus, synth_corpus
from sacnmt.replay import ReplayBuffer, Transition
from sacnmt.rewards import smoothed_sentence_bleu
from sacnmt.trainer import (REPORT_HEADER, Rollout, Trainer, TrainingDiverged, actor_objective, collect_trajectories,
                            mc_returns, oracle_actor_loss, validation_loss)
from sacnmt.vocab import EOS, build_vocab

TINY = dict(emb_dim=8, hidden_dim=8, batch_size=16, buffer_size=200, lr_actor_pretrain=1e-2, lr_joint=1e-3,
            lr_critic_pretrain=1e-3, actor_max_epochs=3, critic_epochs=1, sac_max_epochs=1, seed=3)


def _data(kind="copy", n_train=48, n_valid=16, seed=0):
    spec = SynthTaskSpec(kind=kind, n_pairs=n_train + n_valid, max_len=5, vocab_size=8)
    corpus, records = synth_corpus(spec, np.random.default_rng(seed))
    parts = split_corpus(corpus, records, {"train": n_train, "valid": n_valid})
    train, valid = parts["train"][0], parts["valid"][0]
    return train, valid, build_vocab(train.src), build_vocab(train.tgt)


def _trainer(mode="mle", **kw):
    train, valid, sv, tv = _data("ambiguous-lexicon" if mode == "sac-unsup" else "copy")
    return Trainer(mode, TrainConfig(**{**TINY, **kw}), train, valid, sv, tv)


# --- small pieces -------------------------------------------------------------------

def test_mc_returns():
    np.testing.assert_allclose(mc_returns([0.0, 0.0, 1.0], 1.0), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(mc_returns([0.3, -1.0, 2.0], 0.0), [0.3, -1.0, 2.0])
    np.testing.assert_allclose(mc_returns([1.0, 1.0], 0.5), [1.5, 1.0])


def test_actor_objective_constant_q_pushes_to_uniform(rng):
    logits = ad.Tensor(rng.normal(size=(1, 5)), requires_grad=True)
    loss = actor_objective(ad.log_softmax(logits, axis=-1), np.full((1, 5), 3.0), 0.5)
    loss.backward()
    stepped = logits.data - 0.1 * logits.grad
    def ent(x):
        p = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
        return -(p * np.log(p)).sum()
    assert ent(stepped) > ent(logits.data)


def test_actor_objective_gradient_alpha_zero_is_expected_q(rng):
    # with alpha = 0 the loss is -E_pi[Q], whose logit gradient is -pi * (Q - E_pi[Q])
    z = rng.normal(size=(1, 6))
    q = rng.normal(size=(1, 6))
    logits = ad.Tensor(z, requires_grad=True)
    actor_objective(ad.log_softmax(logits, axis=-1), q, 0.0).backward()
    p = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(logits.grad, -p * (q - (p * q).sum()), atol=1e-12)


def test_buffer_fifo_and_capacity():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.add(Transition((4,), (), 4 + i, 0.0, True))
    assert len(buf) == 3
    assert buf.insertion_ids() == [2, 3, 4]
    assert [t.action for t in buf] == [6, 7, 8]
    with pytest.raises(ValueError):
        ReplayBuffer(0)
    with pytest.raises(ValueError):
        ReplayBuffer(2).sample(1, np.random.default_rng(0))


def test_buffer_sampling_uniform():
    buf = ReplayBuffer(100)
    buf.extend(Transition((4,), (), i, 0.0, True) for i in range(100))
    counts = np.bincount(buf.sample_indices(10_000, np.random.default_rng(0)), minlength=100)
    assert chisquare(counts).pvalue > 0.01


# --- trajectories ---------------------------------------------------------------------

def test_supervised_rollout_structure_and_telescoping():
    t = _trainer("sac-bleu", reward_scale=None, alpha=0.01)
    srcs, refs = t.train_src[:10], t.train_tgt[:10]
    roll = collect_trajectories(t.policy, srcs, refs, t.cfg, np.random.default_rng(0))
    for traj, ref in zip(roll.transitions, refs):
        assert traj[-1].done and not any(s.done for s in traj[:-1])
        assert [len(s.prefix) for s in traj] == list(range(len(traj)))
        actions = [s.action for s in traj]
        n, m = len(actions), len(ref) + 1
        penalty = sum(abs(k - m) for k in range(1, n + 1)) * t.cfg.length_penalty
        bleu = smoothed_sentence_bleu([a for a in actions if a != EOS], ref)
        assert sum(s.reward for s in traj) == pytest.approx((bleu - penalty) / 0.01, abs=1e-9)


def test_unsupervised_rollout_draws_skills():
    t = _trainer("sac-unsup")
    roll = collect_trajectories(t.policy, t.train_src[:8], None, t.cfg, np.random.default_rng(0), t.disc,
                                np.random.default_rng(1))
    skills = [s.skill for s in roll.flat()]
    assert all(0 <= z < t.cfg.skills for z in skills)
    assert roll.pooled.shape == (8, t.cfg.hidden_dim)
    assert all(r <= math.log(t.cfg.skills) * t.cfg.scale + 1e-9 for r in np.concatenate(roll.rewards))


def test_rollout_needs_reward_source():
    t = _trainer("mle")
    with pytest.raises(ValueError):
        collect_trajectories(t.policy, t.train_src[:2], None, t.cfg, np.random.default_rng(0))


def test_oracle_loss_edge_cases():
    t = _trainer("mle")
    assert oracle_actor_loss(t.policy, Rollout([]), 0.01, 0.99) == (None, pytest.approx(float("nan"), nan_ok=True))
    roll = Rollout([[Transition(tuple(t.train_src[0]), (), EOS, 1.0, True)]])
    with pytest.raises(ValueError):
        oracle_actor_loss(t.policy, roll, 0.01, 0.99, kind="bogus")


def test_oracle_loss_single_step_value():
    t = _trainer("mle")
    roll = Rollout([[Transition(tuple(t.train_src[0]), (), EOS, 2.0, True)]])
    loss, value = oracle_actor_loss(t.policy, roll, 0.1, 0.9)
    with ad.no_grad():
        logp = ad.log_softmax(t.policy.outputs_at(np.array([t.train_src[0]]), [[]]), axis=-1).data[0]
    p = np.exp(logp)
    expected = 0.1 * (p * np.where(p > 0, logp, 0)).sum() - p[EOS] * 2.0
    assert value == pytest.approx(expected, abs=1e-12)


# --- schedule ---------------------------------------------------------------------------

def test_patience_zero_runs_one_epoch():
    t = _trainer("mle", actor_patience=0, actor_max_epochs=10)
    t.run()
    assert len(t.report) == 1 and t.stage == "done"


def test_best_checkpoint_restored():
    t = _trainer("mle", actor_max_epochs=4, lr_actor_pretrain=0.05)
    t.run()
    best = min(r["valid_loss"] for r in t.actor_log)
    assert validation_loss(t.policy, t.valid, t.src_vocab, t.tgt_vocab) == pytest.approx(best, abs=1e-12)
    assert len(t.report) == len(t.actor_log)
    assert list(t.report[0]) == list(REPORT_HEADER)


def test_learning_rate_halves_without_improvement():
    t = _trainer("mle", lr_patience=1, actor_patience=5)
    t.best_score = -1.0
    t._track(0.0, False, 5)
    assert t.opt.lr == pytest.approx(TINY["lr_actor_pretrain"] / 2)


def test_full_sac_bleu_pipeline_and_report(tmp_path):
    t = _trainer("sac-bleu", reward_scale=10.0)
    t.run()
    assert [r["epoch"] for r in t.actor_log] == [1, 2, 3]
    assert len(t.critic_log) == 1 and len(t.report) == 1
    row = t.report[0]
    assert all(isinstance(row[k], float) for k in REPORT_HEADER[1:])
    assert len(t.buffer) <= t.cfg.buffer_size
    paths = t.write_reports(tmp_path)
    assert paths["report"].read_text().splitlines()[0] == ",".join(REPORT_HEADER)
    assert "pretrain_critic" in paths


def test_full_sac_unsup_pipeline():
    t = _trainer("sac-unsup")
    before = t.disc.state_dict()
    t.run()
    assert t.report[-1]["critic_loss"] == ""
    assert any(not np.array_equal(before[k], v) for k, v in t.disc.state_dict().items())


def test_pretrained_policy_skips_actor_stage():
    first = _trainer("mle")
    first.run()
    t = Trainer("sac-bleu", TrainConfig(**TINY), first.train, first.valid, first.src_vocab, first.tgt_vocab,
                pretrained=first.policy.state_dict())
    assert t.stage == "critic"


def test_sac_update_targets_move_only_by_ema():
    t = _trainer("sac-bleu", reward_scale=10.0, actor_max_epochs=1)
    t.run(max_epochs=2)
    assert t.stage == "sac"
    prev = [p.data.copy() for p in t.critics.target_parameters()]
    batch = next(batch_iter(t.train, t.src_vocab, t.tgt_vocab, 16, np.random.default_rng(0)))
    t.sac_update(batch)
    for p, m, old in zip(t.critics.target_parameters(), t.critics.main_parameters(), prev):
        np.testing.assert_array_equal(p.data, t.cfg.tau * m.data + (1 - t.cfg.tau) * old)


def test_repeated_nan_losses_abort():
    t = _trainer("sac-bleu", reward_scale=10.0, actor_max_epochs=1, max_nan_skips=3)
    t.run(max_epochs=2)
    t.buffer.extend([Transition(tuple(t.train_src[0]), (), EOS, float("nan"), True, tuple(t.train_tgt[0]))] * 500)
    batch = next(batch_iter(t.train, t.src_vocab, t.tgt_vocab, 16, np.random.default_rng(0)))
    before = t.policy.state_dict()
    assert t.sac_update(batch).skipped
    assert all(np.array_equal(before[k], v) for k, v in t.policy.state_dict().items())
    t.sac_update(batch)
    with pytest.raises(TrainingDiverged):
        t.sac_update(batch)


def test_same_seed_same_report(tmp_path):
    paths = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        t = _trainer("sac-bleu", reward_scale=10.0)
        t.run()
        paths.append(t.write_reports(tmp_path / name))
    for key in paths[0]:
        assert paths[0][key].read_bytes() == paths[1][key].read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    full = _trainer("sac-bleu", reward_scale=10.0)
    full.run()
    part = _trainer("sac-bleu", reward_scale=10.0)
    part.run(state_path=tmp_path / "state.pkl", max_epochs=2)
    resumed = Trainer.load_state(tmp_path / "state.pkl")
    assert resumed.stage != "done"
    resumed.run()
    assert resumed.report == full.report
    assert resumed.critic_log == full.critic_log


def test_bad_state_file(tmp_path):
    import pickle
    (tmp_path / "s.pkl").write_bytes(pickle.dumps({"version": 99}))
    with pytest.raises(ValueError):
        Trainer.load_state(tmp_path / "s.pkl")


def test_bad_mode_and_config():
    train, valid, sv, tv = _data()
    with pytest.raises(ValueError):
        Trainer("rl", TrainConfig(), train, valid, sv, tv)
    with pytest.raises(ConfigError):
        Trainer("mle", TrainConfig(alpha=0.0), train, valid, sv, tv)


def test_mle_training_lowers_validation_loss():
    t = _trainer("mle", actor_max_epochs=12, lr_actor_pretrain=2e-2, emb_dim=16, hidden_dim=16)
    t.run()
    assert t.actor_log[-1]["valid_loss"] < t.actor_log[0]["valid_loss"]
