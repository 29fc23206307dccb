"""Training pipeline: MLE actor pretraining, critic pretraining and SAC fine-tuning.

``Trainer`` runs the stages one epoch at a time and can snapshot itself after
every epoch, so an interrupted run resumes to the same report.
"""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import MODES, TrainConfig
from .corpus import Batch, ParallelCorpus, batch_iter, pad_ids
from .critic import CriticEnsemble, critic_loss, min_q, q_values
from .metrics import corpus_bleu, write_csv
from .model import ModelConfig, Seq2Seq
from .optim import Adam, clip_param_grads
from .replay import ReplayBuffer, Transition
from .rewards import Discriminator, assign_skills, discriminator_update, per_step_bleu_rewards, unsup_reward
from .vocab import BOS, EOS, PAD, Vocabulary

log = logging.getLogger(__name__)

REPORT_HEADER = ("epoch", "mle_loss", "critic_loss", "actor_loss", "mean_reward", "mean_entropy", "valid_bleu")
PRETRAIN_HEADER = ("epoch", "train_loss", "valid_loss", "valid_bleu", "lr")
CRITIC_HEADER = ("epoch", "critic_loss", "mean_reward")
STATE_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# --- losses -----------------------------------------------------------------------

def actor_objective(logp: Tensor, q: np.ndarray, alpha: float) -> Tensor:
    """mean_s sum_a pi(a|s) * (alpha * log pi(a|s) - Q(s, a)); Q is a constant."""
    probs = ad.exp(logp)
    return ad.mean(ad.sum(probs * (logp * alpha - np.asarray(q)), axis=-1))


def actor_loss(policy: Seq2Seq, critics: CriticEnsemble, states: Sequence[Transition], alpha: float) -> Tensor:
    """Policy loss on replayed states against the minimum of the two main critics."""
    src = pad_ids([t.source for t in states])
    prefixes = [list(t.prefix) for t in states]
    logp = ad.log_softmax(policy.outputs_at(src, prefixes), axis=-1)
    cond = [t.reference for t in states]
    with ad.no_grad():
        q = min_q(*(q_values(m, cond, prefixes).data for m in critics.mains))
    return actor_objective(logp, q, alpha)


def mc_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Discounted reward-to-go: G_t = sum_k gamma^(k-t) r_k."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


# --- evaluation helpers -----------------------------------------------------------------

def encode_sources(corpus: ParallelCorpus, src_vocab: Vocabulary) -> list[list[int]]:
    return [src_vocab.encode(s) for s in corpus.src]


def translate_ids(model: Seq2Seq, sources: Sequence[Sequence[int]], batch_size: int = 64) -> list[list[int]]:
    out: list[list[int]] = []
    for start in range(0, len(sources), batch_size):
        out.extend(model.greedy_decode(pad_ids(sources[start:start + batch_size])))
    return out


def validation_bleu(model: Seq2Seq, corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                    batch_size: int = 64) -> float:
    hyps = translate_ids(model, encode_sources(corpus, src_vocab), batch_size)
    return corpus_bleu([tgt_vocab.decode(h) for h in hyps], [tgt_vocab.decode(tgt_vocab.encode(t)) for t in corpus.tgt])


def validation_loss(model: Seq2Seq, corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                    batch_size: int = 64) -> float:
    """Token-weighted mean NLL."""
    total = tokens = 0.0
    with ad.no_grad():
        for batch in batch_iter(corpus, src_vocab, tgt_vocab, batch_size):
            n = float((batch.tgt != PAD).sum())
            total += model.mle_loss(batch.src, batch.tgt).item() * n
            tokens += n
    return total / tokens


def mean_entropy(model: Seq2Seq, sources: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    """Mean entropy of the policy over the steps of its greedy outputs."""
    ents = []
    for start in range(0, len(sources), batch_size):
        ents.extend(np.concatenate(model.greedy(pad_ids(sources[start:start + batch_size])).entropies))
    return float(np.mean(ents))


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


# --- trajectories ------------------------------------------------------------------------

@dataclass
class Rollout:
    transitions: list[list[Transition]]     # per sentence
    pooled: np.ndarray | None = None        # (B, H) policy source encodings (unsupervised mode)

    @property
    def rewards(self) -> list[np.ndarray]:
        return [np.array([t.reward for t in traj]) for traj in self.transitions]

    def flat(self) -> list[Transition]:
        return [t for traj in self.transitions for t in traj]


def pooled_encoding(model: Seq2Seq, src: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        enc = model.encode(src)
    return (enc.states.data * enc.mask[:, :, None]).sum(axis=1) / enc.lengths[:, None]


def collect_trajectories(policy: Seq2Seq, sources: Sequence[Sequence[int]], references: Sequence[Sequence[int]] | None,
                         cfg: TrainConfig, rng: np.random.Generator, disc: Discriminator | None = None,
                         skill_rng: np.random.Generator | None = None) -> Rollout:
    """Sample one translation per source and turn every step into a Transition.

    Supervised mode (``references`` given) uses shaped BLEU rewards; otherwise
    each sampled token gets a uniform skill label and the discriminator reward.
    Rewards are multiplied by ``cfg.scale``.
    """
    if references is None and disc is None:
        raise ValueError("need references (supervised) or a discriminator (unsupervised)")
    src = pad_ids(sources)
    sample = policy.sample(src, rng, cfg.sample_temperature if references is not None else 1.0)
    pooled = None if references is not None else pooled_encoding(policy, src)
    out = []
    for i, actions in enumerate(sample.tokens):
        source = tuple(int(x) for x in sources[i])
        if references is not None:
            ref = tuple(int(x) for x in references[i])
            rewards = per_step_bleu_rewards(actions, ref, cfg.length_penalty)
            skills = [None] * len(actions)
        else:
            ref = None
            skills = assign_skills(len(actions), cfg.skills, skill_rng if skill_rng is not None else rng)
            rewards = unsup_reward(disc, np.tile(pooled[i], (len(actions), 1)), actions, skills)
        rewards = rewards * cfg.scale
        out.append([
            Transition(source, tuple(actions[:t]), int(a), float(rewards[t]), t == len(actions) - 1, ref,
                       None if skills[t] is None else int(skills[t]))
            for t, a in enumerate(actions)
        ])
    return Rollout(out, pooled)


# --- single updates ----------------------------------------------------------------------

@dataclass
class UpdateStats:
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")
    mle_loss: float = float("nan")
    skipped: bool = False


def _step(loss: Tensor, opt: Adam, clip: float) -> None:
    opt.zero_grad()
    loss.backward()
    clip_param_grads(opt.params, clip)
    opt.step()


def critic_step(critics: CriticEnsemble, policy: Seq2Seq, buffer: ReplayBuffer, opt: Adam, cfg: TrainConfig,
                alpha: float, rng: np.random.Generator) -> float:
    """One TD step on a uniform buffer sample followed by the EMA target update."""
    batch = buffer.sample(cfg.batch_size, rng)
    loss, _ = critic_loss(batch, critics, policy, alpha, cfg.gamma)
    value = loss.item()
    if _finite(value):
        _step(loss, opt, cfg.clip_norm)
        critics.ema_update(cfg.tau)
    return value


class Trainer:
    """All state of one training run (models, optimizers, buffer, RNG streams, logs)."""

    def __init__(self, mode: str, cfg: TrainConfig, train: ParallelCorpus, valid: ParallelCorpus,
                 src_vocab: Vocabulary, tgt_vocab: Vocabulary, pretrained: dict[str, np.ndarray] | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        cfg.validate()
        if len(train) == 0 or len(valid) == 0:
            raise ValueError("training and validation corpora must be non-empty")
        self.mode, self.cfg = mode, cfg
        self.train, self.valid = train, valid
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        # one independent stream per purpose, so skipping a stage does not shift the others
        streams = np.random.SeedSequence(cfg.seed).spawn(8)
        self.rngs = dict(zip(("init", "actor_data", "critic_data", "critic_sample", "sac_data", "sac_sample",
                              "replay", "skills"), (np.random.default_rng(s) for s in streams)))
        mcfg = ModelConfig(len(src_vocab), len(tgt_vocab), cfg.emb_dim, cfg.hidden_dim)
        self.policy = Seq2Seq(mcfg, self.rngs["init"])
        self.critics = CriticEnsemble(mcfg, self.rngs["init"], cfg.tau, cfg.scale) if mode == "sac-bleu" else None
        self.buffer = ReplayBuffer(cfg.buffer_size) if mode == "sac-bleu" else None
        self.disc = (Discriminator(cfg.hidden_dim, len(tgt_vocab), cfg.skills, cfg.disc_emb_dim, cfg.disc_hidden,
                                   self.rngs["init"], cfg.lr_disc) if mode == "sac-unsup" else None)
        self.alpha = cfg.alpha
        self.valid_src = encode_sources(valid, src_vocab)
        self.train_src = encode_sources(train, src_vocab)
        self.train_tgt = [tgt_vocab.encode(t) for t in train.tgt]

        self.stage = "actor"
        if pretrained is not None:
            self.policy.load_state_dict(pretrained)
            self.stage = self._after_actor()
        self.epoch = 0
        self.since_best = 0
        self.best_score: float | None = None
        self.best_state: dict | None = None
        self.actor_log: list[dict] = []
        self.critic_log: list[dict] = []
        self.report: list[dict] = []
        self.nan_skips = 0
        self.opt: Adam | None = None
        self.critic_opt: Adam | None = None
        if self.stage == "actor":
            self.opt = Adam(self.policy.parameters(), cfg.lr_actor_pretrain, weight_decay=cfg.weight_decay)
        else:
            self._enter(self.stage)

    # --- stage bookkeeping -------------------------------------------------------

    def _after_actor(self) -> str:
        if self.mode == "mle":
            return "done"
        return "critic" if self.mode == "sac-bleu" and self.cfg.critic_epochs > 0 else "sac"

    def _enter(self, stage: str) -> None:
        cfg = self.cfg
        self.stage = stage
        self.epoch = 0
        self.since_best = 0
        self.best_score = None
        self.best_state = None
        if stage == "critic":
            self.critic_opt = Adam(self.critics.main_parameters(), cfg.lr_critic_pretrain,
                                   weight_decay=cfg.weight_decay)
        elif stage == "sac":
            self.opt = Adam(self.policy.parameters(), cfg.lr_joint, weight_decay=cfg.weight_decay)
            if self.critics is not None:
                self.critic_opt = Adam(self.critics.main_parameters(), cfg.lr_joint, weight_decay=cfg.weight_decay)

    def _snapshot(self) -> dict:
        snap = {"policy": self.policy.state_dict()}
        if self.critics is not None:
            snap["critics"] = [m.state_dict() for m in self.critics.mains + self.critics.targets]
        if self.disc is not None:
            snap["disc"] = self.disc.state_dict()
        return snap

    def _restore(self, snap: dict) -> None:
        self.policy.load_state_dict(snap["policy"])
        if "critics" in snap:
            for m, s in zip(self.critics.mains + self.critics.targets, snap["critics"]):
                m.load_state_dict(s)
        if "disc" in snap:
            self.disc.load_state_dict(snap["disc"])

    def _halve_lr(self) -> None:
        for opt in (self.opt, self.critic_opt):
            if opt is not None:
                opt.lr *= 0.5
        log.info("learning rate halved to %g", self.opt.lr)

    def _track(self, score: float, higher_is_better: bool, patience: int) -> bool:
        """Update best/patience bookkeeping; returns True when the stage should stop."""
        better = self.best_score is None or (score > self.best_score if higher_is_better else score < self.best_score)
        if better:
            self.best_score = score
            self.best_state = self._snapshot()
            self.since_best = 0
        else:
            self.since_best += 1
            if self.cfg.lr_patience and self.since_best % self.cfg.lr_patience == 0:
                self._halve_lr()
        return self.since_best > patience - 1 if patience > 0 else True

    # --- epochs ---------------------------------------------------------------------

    def _actor_epoch(self) -> None:
        cfg = self.cfg
        losses = []
        for batch in batch_iter(self.train, self.src_vocab, self.tgt_vocab, cfg.batch_size, self.rngs["actor_data"]):
            loss = self.policy.mle_loss(batch.src, batch.tgt)
            if not _finite(loss.item()):
                raise TrainingDiverged(f"MLE loss became {loss.item()} in pretraining epoch {self.epoch + 1}")
            _step(loss, self.opt, cfg.clip_norm)
            losses.append(loss.item())
        self.epoch += 1
        vloss = validation_loss(self.policy, self.valid, self.src_vocab, self.tgt_vocab, cfg.batch_size)
        if not _finite(vloss):
            raise TrainingDiverged(f"validation loss became {vloss} in pretraining epoch {self.epoch}")
        bleu = validation_bleu(self.policy, self.valid, self.src_vocab, self.tgt_vocab, cfg.batch_size)
        self.actor_log.append({"epoch": self.epoch, "train_loss": float(np.mean(losses)), "valid_loss": vloss,
                               "valid_bleu": bleu, "lr": self.opt.lr})
        if self.mode == "mle":
            self.report.append({"epoch": self.epoch, "mle_loss": float(np.mean(losses)), "critic_loss": "",
                                "actor_loss": "", "mean_reward": "",
                                "mean_entropy": mean_entropy(self.policy, self.valid_src, cfg.batch_size),
                                "valid_bleu": bleu})
        log.info("actor epoch %d: train %.4f valid %.4f bleu %.2f", self.epoch, np.mean(losses), vloss, bleu)
        stop = self._track(vloss, False, cfg.actor_patience) or self.epoch >= cfg.actor_max_epochs
        if stop:
            self._restore(self.best_state)
            self._enter(self._after_actor())

    def _critic_epoch(self) -> None:
        cfg = self.cfg
        losses, rewards = [], []
        for batch in self._batches("critic_data"):
            rollout = collect_trajectories(self.policy, [self.train_src[i] for i in batch.indices],
                                           [self.train_tgt[i] for i in batch.indices], cfg, self.rngs["critic_sample"])
            self.buffer.extend(rollout.flat())
            rewards.extend(r.sum() for r in rollout.rewards)
            for _ in range(cfg.updates_per_batch):
                value = critic_step(self.critics, self.policy, self.buffer, self.critic_opt, cfg, self.alpha,
                                    self.rngs["replay"])
                if not _finite(value):
                    raise TrainingDiverged(f"critic loss became {value} in critic pretraining")
                losses.append(value)
        self.epoch += 1
        self.critic_log.append({"epoch": self.epoch, "critic_loss": float(np.mean(losses)),
                                "mean_reward": float(np.mean(rewards))})
        log.info("critic epoch %d: loss %.4f", self.epoch, np.mean(losses))
        if self.epoch >= cfg.critic_epochs:
            self._enter("sac")

    def _batches(self, stream: str):
        return batch_iter(self.train, self.src_vocab, self.tgt_vocab, self.cfg.batch_size, self.rngs[stream])

    def _skip(self, what: str) -> None:
        self.nan_skips += 1
        log.warning("non-finite %s; update skipped (%d in a row)", what, self.nan_skips)
        if self.nan_skips >= self.cfg.max_nan_skips:
            raise TrainingDiverged(f"{self.nan_skips} consecutive updates skipped on non-finite losses")

    def sac_update(self, batch: Batch) -> UpdateStats:
        """Critic step, then actor step (actor loss + lambda_mle * MLE), then EMA of the targets."""
        cfg = self.cfg
        trans = self.buffer.sample(cfg.batch_size, self.rngs["replay"])
        c_loss, _ = critic_loss(trans, self.critics, self.policy, self.alpha, cfg.gamma)
        a_loss = actor_loss(self.policy, self.critics, trans, self.alpha)
        mle = self.policy.mle_loss(batch.src, batch.tgt)
        stats = UpdateStats(c_loss.item(), a_loss.item(), mle.item())
        if not _finite(stats.critic_loss, stats.actor_loss, stats.mle_loss):
            self._skip("SAC loss")
            stats.skipped = True
            return stats
        self.nan_skips = 0
        _step(c_loss, self.critic_opt, cfg.clip_norm)
        _step(a_loss + mle * cfg.lambda_mle, self.opt, cfg.clip_norm)
        self.critics.ema_update(cfg.tau)
        if cfg.auto_alpha:
            self._update_alpha(trans)
        return stats

    def _update_alpha(self, trans: Sequence[Transition]) -> None:
        with ad.no_grad():
            logp = ad.log_softmax(self.policy.outputs_at(pad_ids([t.source for t in trans]),
                                                         [list(t.prefix) for t in trans]), axis=-1).data
        entropy = float(-(np.exp(logp) * np.where(np.exp(logp) > 0, logp, 0.0)).sum(-1).mean())
        self.alpha = max(0.0, self.alpha - self.opt.lr * (entropy - self.cfg.target_entropy))

    def oracle_update(self, rollout: Rollout, batch: Batch) -> UpdateStats:
        """Unsupervised update: Monte-Carlo Q estimates in the actor loss, then a discriminator step."""
        cfg = self.cfg
        loss, value = oracle_actor_loss(self.policy, rollout, self.alpha, cfg.gamma, cfg.unsup_update)
        mle = self.policy.mle_loss(batch.src, batch.tgt)
        stats = UpdateStats(float("nan"), value, mle.item())
        if not _finite(value, stats.mle_loss):
            self._skip("actor loss")
            stats.skipped = True
            return stats
        self.nan_skips = 0
        _step(loss + mle * cfg.lambda_mle, self.opt, cfg.clip_norm)
        flat = rollout.flat()
        rows = np.concatenate([np.full(len(traj), i) for i, traj in enumerate(rollout.transitions)])
        discriminator_update(self.disc, rollout.pooled[rows], [t.action for t in flat], [t.skill for t in flat])
        return stats

    def _sac_epoch(self) -> None:
        cfg = self.cfg
        c_losses, a_losses, m_losses, rewards = [], [], [], []
        for batch in self._batches("sac_data"):
            srcs = [self.train_src[i] for i in batch.indices]
            if self.mode == "sac-bleu":
                rollout = collect_trajectories(self.policy, srcs, [self.train_tgt[i] for i in batch.indices], cfg,
                                               self.rngs["sac_sample"])
                self.buffer.extend(rollout.flat())
                updates = [self.sac_update(batch) for _ in range(cfg.updates_per_batch)]
            else:
                rollout = collect_trajectories(self.policy, srcs, None, cfg, self.rngs["sac_sample"], self.disc,
                                               self.rngs["skills"])
                updates = [self.oracle_update(rollout, batch)]
            rewards.extend(r.sum() for r in rollout.rewards)
            for stats in updates:
                if not stats.skipped:
                    c_losses.append(stats.critic_loss)
                    a_losses.append(stats.actor_loss)
                    m_losses.append(stats.mle_loss)
        self.epoch += 1
        bleu = validation_bleu(self.policy, self.valid, self.src_vocab, self.tgt_vocab, cfg.batch_size)
        row = {
            "epoch": self.epoch,
            "mle_loss": _mean(m_losses),
            "critic_loss": _mean(c_losses) if self.mode == "sac-bleu" else "",
            "actor_loss": _mean(a_losses),
            "mean_reward": _mean(rewards),
            "mean_entropy": mean_entropy(self.policy, self.valid_src, cfg.batch_size),
            "valid_bleu": bleu,
        }
        self.report.append(row)
        log.info("sac epoch %d: %s", self.epoch, row)
        stop = self._track(bleu, True, cfg.sac_patience) or self.epoch >= cfg.sac_max_epochs
        if stop:
            self._restore(self.best_state)
            self.stage = "done"

    # --- driver -----------------------------------------------------------------------

    def step_epoch(self) -> None:
        {"actor": self._actor_epoch, "critic": self._critic_epoch, "sac": self._sac_epoch}[self.stage]()

    def run(self, state_path: str | Path | None = None, on_epoch: Callable[[Trainer], None] | None = None,
            max_epochs: int | None = None) -> list[dict]:
        """Run remaining stages; snapshot to ``state_path`` after each epoch.

        ``max_epochs`` bounds the number of epochs run by this call (any stage),
        which lets callers interrupt a run deliberately.
        """
        done = 0
        while self.stage != "done" and (max_epochs is None or done < max_epochs):
            self.step_epoch()
            done += 1
            if state_path is not None:
                self.save_state(state_path)
            if on_epoch is not None:
                on_epoch(self)
        return self.report

    def save_state(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump({"version": STATE_VERSION, "trainer": self}, fh, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(path)

    @staticmethod
    def load_state(path: str | Path) -> Trainer:
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
        if not isinstance(blob, dict) or blob.get("version") != STATE_VERSION:
            raise ValueError(f"{path}: unsupported training-state format")
        return blob["trainer"]

    def write_reports(self, directory: str | Path) -> dict[str, Path]:
        directory = Path(directory)
        paths = {"report": directory / "report.csv"}
        write_csv(paths["report"], self.report, REPORT_HEADER)
        if self.actor_log:
            paths["pretrain_actor"] = directory / "pretrain_actor.csv"
            write_csv(paths["pretrain_actor"], self.actor_log, PRETRAIN_HEADER)
        if self.critic_log:
            paths["pretrain_critic"] = directory / "pretrain_critic.csv"
            write_csv(paths["pretrain_critic"], self.critic_log, CRITIC_HEADER)
        return paths


def _mean(values: Sequence[float]) -> float | str:
    return float(np.mean(values)) if len(values) else ""


def oracle_actor_loss(policy: Seq2Seq, rollout: Rollout, alpha: float, gamma: float, kind: str = "oracle",
                      ) -> tuple[Tensor | None, float]:
    """Actor loss on the sampled trajectories using Monte-Carlo returns as Q estimates.

    ``oracle``: sum_a pi(a) (alpha log pi(a) - Q_hat(a)), Q_hat zero off the sampled action.
    ``pg``: -Q_hat log pi(a_t) - alpha H(pi), plain REINFORCE with an entropy bonus.
    """
    trajs = [t for t in rollout.transitions if t]
    if not trajs:
        return None, float("nan")
    src = pad_ids([t[0].source for t in trajs])
    actions = pad_ids([[s.action for s in t] for t in trajs])
    returns = np.zeros(actions.shape)
    for i, t in enumerate(trajs):
        returns[i, :len(t)] = mc_returns([s.reward for s in t], gamma)
    mask = np.zeros(actions.shape)
    for i, t in enumerate(trajs):
        mask[i, :len(t)] = 1.0
    inputs = np.concatenate([np.full((len(trajs), 1), BOS), actions[:, :-1]], axis=1)
    logp = ad.log_softmax(policy.teacher_force(src, inputs), axis=-1)
    probs = ad.exp(logp)
    taken_logp = ad.gather(logp, actions)
    ent_term = ad.sum(probs * logp, axis=-1) * alpha     # alpha * sum_a pi log pi
    if kind == "oracle":
        per_step = ent_term - ad.exp(taken_logp) * returns
    elif kind == "pg":
        per_step = ent_term - taken_logp * returns
    else:
        raise ValueError(f"unknown unsupervised update {kind!r}")
    loss = ad.sum(per_step * mask) * (1.0 / mask.sum())
    return loss, loss.item()
