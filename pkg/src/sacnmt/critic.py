"""Soft Q critics: two main networks, two EMA targets, soft state value and TD loss."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import pad_ids
from .model import ModelConfig, Seq2Seq
from .replay import Transition


def min_q(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Elementwise minimum of two Q-value arrays (clipped double Q)."""
    q1, q2 = np.asarray(q1, dtype=np.float64), np.asarray(q2, dtype=np.float64)
    if q1.shape != q2.shape:
        raise ValueError(f"min_q: shapes {q1.shape} and {q2.shape} differ")
    return np.minimum(q1, q2)


def soft_value(q: np.ndarray, probs: np.ndarray, alpha: float, log_probs: np.ndarray | None = None) -> np.ndarray:
    """Exact expectation over actions of Q - alpha * log pi (last axis).

    Zero-probability actions contribute nothing. ``log_probs`` may be passed
    to avoid recomputing log(probs) when it is already known.
    """
    q = np.asarray(q, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if log_probs is None:
        with np.errstate(divide="ignore"):
            log_probs = np.log(probs)
    support = probs > 0
    terms = np.where(support, probs * (q - alpha * np.where(support, log_probs, 0.0)), 0.0)
    return terms.sum(axis=-1)


def bellman_targets(rewards: np.ndarray, dones: np.ndarray, next_values: np.ndarray, gamma: float) -> np.ndarray:
    """y = r + gamma * V(s'), with V of a terminal successor taken as 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    live = ~np.asarray(dones, dtype=bool)
    return rewards + gamma * np.where(live, next_values, 0.0)


def td_loss(q_taken: Sequence[Tensor], targets: np.ndarray) -> Tensor:
    """Mean squared error of each main critic's Q(s, a) against the shared constant target."""
    if not len(targets):
        raise ValueError("empty batch")
    losses = [ad.mean((q - targets) * (q - targets)) for q in q_taken]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def ema_update(mains: Sequence[Tensor], targets: Sequence[Tensor], tau: float) -> None:
    """target <- tau * main + (1 - tau) * target, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for m, t in zip(mains, targets, strict=True):
        t.data = tau * m.data + (1.0 - tau) * t.data


class CriticEnsemble:
    """Two main Q networks and their EMA targets, each shaped like the policy network.

    In supervised mode the critics read the reference sentence where the
    policy reads the source.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None, tau: float = 0.005,
                 output_scale: float = 1.0):
        # the critic encoder reads target-side sentences
        config = replace(config, src_vocab_size=config.tgt_vocab_size, mask_special_outputs=False,
                         output_scale=output_scale)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.tau = tau
        self.mains = [Seq2Seq(config, rng), Seq2Seq(config, rng)]
        for m in self.mains:
            # every Q starts at exactly 0: scaled random outputs would rank unvisited actions arbitrarily
            m.params["out_W"].data[:] = 0.0
        self.targets = [m.clone() for m in self.mains]

    def main_parameters(self) -> list[Tensor]:
        return [p for m in self.mains for p in m.parameters()]

    def target_parameters(self) -> list[Tensor]:
        return [p for t in self.targets for p in t.parameters()]

    def ema_update(self, tau: float | None = None) -> None:
        ema_update(self.main_parameters(), self.target_parameters(), self.tau if tau is None else tau)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        for i, (m, t) in enumerate(zip(self.mains, self.targets), 1):
            m.save(directory / f"critic_main{i}.npz", {"role": "main"})
            t.save(directory / f"critic_target{i}.npz", {"role": "target"})

    def load(self, directory: str | Path) -> None:
        directory = Path(directory)
        for i, (m, t) in enumerate(zip(self.mains, self.targets), 1):
            m.load_state_dict(Seq2Seq.load(directory / f"critic_main{i}.npz")[0].state_dict())
            t.load_state_dict(Seq2Seq.load(directory / f"critic_target{i}.npz")[0].state_dict())


def q_values(critic: Seq2Seq, conditioning: Sequence[Sequence[int]], prefixes: Sequence[Sequence[int]]) -> Tensor:
    """Per-action Q(s, .) for each (conditioning sentence, prefix) pair; shape (B, V)."""
    if any(len(c) == 0 for c in conditioning):
        raise ValueError("empty conditioning sentence")
    return critic.outputs_at(pad_ids(conditioning), [list(p) for p in prefixes])


def _conditioning(batch: Sequence[Transition]) -> list[tuple[int, ...]]:
    if any(t.reference is None for t in batch):
        raise ValueError("critic transitions need the reference sentence")
    return [t.reference for t in batch]


def next_state_values(batch: Sequence[Transition], critics: CriticEnsemble, policy: Seq2Seq, alpha: float,
                      ) -> np.ndarray:
    """Soft value of each successor state under the target critics (0 for terminal steps)."""
    values = np.zeros(len(batch))
    live = [i for i, t in enumerate(batch) if not t.done]
    if not live:
        return values
    cond = [batch[i].reference for i in live]
    nxt = [list(batch[i].prefix) + [batch[i].action] for i in live]
    with ad.no_grad():
        logp = ad.log_softmax(policy.outputs_at(pad_ids([batch[i].source for i in live]), nxt), axis=-1).data
        q_next = min_q(*(q_values(t, cond, nxt).data for t in critics.targets))
    values[live] = soft_value(q_next, np.exp(logp), alpha, log_probs=logp)
    return values


def critic_loss(batch: Sequence[Transition], critics: CriticEnsemble, policy: Seq2Seq, alpha: float,
                gamma: float) -> tuple[Tensor, np.ndarray]:
    """TD loss of both main critics on a replay batch; returns (loss, targets)."""
    if not batch:
        raise ValueError("empty batch")
    cond = _conditioning(batch)
    y = bellman_targets([t.reward for t in batch], [t.done for t in batch],
                        next_state_values(batch, critics, policy, alpha), gamma)
    actions = np.array([t.action for t in batch])
    prefixes = [t.prefix for t in batch]
    taken = [ad.gather(q_values(m, cond, prefixes), actions) for m in critics.mains]
    return td_loss(taken, y), y
