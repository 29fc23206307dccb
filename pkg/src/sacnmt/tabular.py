"""Tabular harness for the critic machinery.

A small deterministic MDP on which the same soft-value, Bellman-target, TD
loss and EMA code used for the neural critics can be checked against soft
value iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from . import autodiff as ad
from .autodiff import Tensor
from .critic import bellman_targets, ema_update, min_q, soft_value, td_loss
from .optim import Adam


@dataclass
class TabularMDP:
    next_state: np.ndarray    # (S, A) successor index
    rewards: np.ndarray       # (S, A)
    done: np.ndarray          # (S, A) episode ends after taking a in s

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]


def three_state_mdp() -> TabularMDP:
    """3 states x 2 actions with one terminating action."""
    return TabularMDP(
        next_state=np.array([[1, 2], [0, 2], [2, 0]]),
        rewards=np.array([[1.0, 0.0], [0.5, 2.0], [-1.0, 0.3]]),
        done=np.array([[False, False], [False, True], [False, False]]),
    )


def policy_probs(q: np.ndarray, alpha: float) -> np.ndarray:
    """Soft-greedy policy softmax(Q / alpha) per state."""
    return softmax(q / alpha, axis=-1)


def soft_q_iteration(mdp: TabularMDP, gamma: float, alpha: float, policy: np.ndarray | None = None,
                     tol: float = 1e-14, max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of the soft Bellman backup.

    With ``policy`` given this is soft policy evaluation; without it the
    policy is the soft-greedy one and V(s) = alpha * logsumexp(Q(s) / alpha).
    """
    q = np.zeros_like(mdp.rewards, dtype=np.float64)
    for _ in range(max_iter):
        if policy is None:
            v = alpha * logsumexp(q / alpha, axis=-1)
        else:
            ent = -np.sum(np.where(policy > 0, policy * np.log(np.where(policy > 0, policy, 1.0)), 0.0), axis=-1)
            v = np.sum(policy * q, axis=-1) + alpha * ent
        new = mdp.rewards + gamma * np.where(mdp.done, 0.0, v[mdp.next_state])
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
    raise RuntimeError("soft value iteration did not converge")


@dataclass
class TabularCritics:
    mains: list[Tensor]
    targets: list[Tensor]


def train_tabular_critics(mdp: TabularMDP, gamma: float, alpha: float, policy: np.ndarray | None = None,
                          steps: int = 20_000, lr: float = 0.05, tau: float = 0.005, seed: int = 0,
                          ) -> TabularCritics:
    """Train two Q tables on every (s, a) pair with TD loss, Adam and EMA targets.

    The learning rate decays linearly to 1% of ``lr`` so Adam's step noise
    does not mask convergence.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    mains = [Tensor(rng.normal(size=(S, A)), requires_grad=True, name=f"q{i}") for i in (1, 2)]
    targets = [Tensor(m.data.copy(), name=f"q{i}_target") for i, m in enumerate(mains, 1)]
    opt = Adam(mains, lr=lr, weight_decay=0.0)
    states = np.repeat(np.arange(S), A)
    actions = np.tile(np.arange(A), S)
    nxt = mdp.next_state[states, actions]
    for step in range(steps):
        opt.lr = lr * (1.0 - 0.99 * step / steps)
        q_next = min_q(targets[0].data[nxt], targets[1].data[nxt])
        pi = policy[nxt] if policy is not None else policy_probs(q_next, alpha)
        y = bellman_targets(mdp.rewards[states, actions], mdp.done[states, actions],
                            soft_value(q_next, pi, alpha), gamma)
        opt.zero_grad()
        loss = td_loss([ad.gather(ad.getitem(m, states), actions) for m in mains], y)
        loss.backward()
        opt.step()
        ema_update(mains, targets, tau)
    return TabularCritics(mains, targets)
