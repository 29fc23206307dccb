"""Reward engines: shaped smoothed-BLEU rewards and the skill-discriminator reward."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_arrays
from .metrics import bleu_from_stats, bleu_stats
from .optim import Adam
from .vocab import EOS

PROB_FLOOR = 1e-8


@dataclass
class RewardSpec:
    mode: str = "supervised-bleu"       # supervised-bleu | unsupervised-skill
    length_penalty: float = 1e-4
    alpha: float = 0.01                 # rewards are divided by this
    skills: int = 4

    def __post_init__(self):
        if self.mode not in ("supervised-bleu", "unsupervised-skill"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.length_penalty < 0:
            raise ValueError("length penalty must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.mode == "unsupervised-skill" and self.skills < 2:
            raise ValueError(f"skill count must be >= 2, got {self.skills}")


# --- supervised BLEU reward ------------------------------------------------------

def smoothed_sentence_bleu(hypothesis: Sequence[Hashable], reference: Sequence[Hashable]) -> float:
    """Sentence BLEU-4 in [0, 1] with add-one smoothing on the 2..4-gram precisions."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return bleu_from_stats(bleu_stats(hypothesis, reference), smooth=True)


def _strip_eos(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t != EOS]


def per_step_bleu_rewards(actions: Sequence[int], reference: Sequence[int], length_penalty: float = 1e-4,
                          ) -> np.ndarray:
    """Shaped reward for every emitted action.

    r_t = BLEU(prefix_t) - BLEU(prefix_{t-1}) - coeff * |t - |y||. Lengths
    count actions, so the reference length includes its closing EOS and a
    perfect hypothesis pays no penalty on its final step. EOS itself never
    enters the n-gram statistics.
    """
    reference = _strip_eos(reference)
    target_len = len(reference) + 1
    rewards = np.empty(len(actions))
    prev = 0.0
    for t in range(1, len(actions) + 1):
        cur = smoothed_sentence_bleu(_strip_eos(actions[:t]), reference)
        rewards[t - 1] = cur - prev - length_penalty * abs(t - target_len)
        prev = cur
    return rewards


def length_penalties(n_actions: int, reference_len: int, length_penalty: float) -> np.ndarray:
    """The per-step penalty terms subtracted by :func:`per_step_bleu_rewards`."""
    t = np.arange(1, n_actions + 1)
    return length_penalty * np.abs(t - (reference_len + 1))


def rescale_reward(r, alpha: float):
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return np.asarray(r, dtype=np.float64) / alpha if np.ndim(r) else float(r) / alpha


# --- unsupervised skill reward ----------------------------------------------------

class Discriminator:
    """q(z | x, a): a feed-forward classifier over skills.

    Input is the mean-pooled source encoding concatenated with an embedding of
    the action, followed by two tanh layers of width ``hidden``.
    """

    def __init__(self, enc_dim: int, vocab_size: int, skills: int = 4, emb_dim: int = 32, hidden: int = 100,
                 rng: np.random.Generator | None = None, lr: float = 1e-4):
        if skills < 2:
            raise ValueError(f"skill count must be >= 2, got {skills}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.skills = skills
        self.params = {
            "emb": Tensor(ad.xavier_uniform(rng, (vocab_size, emb_dim)), requires_grad=True, name="emb"),
            "W1": Tensor(ad.xavier_uniform(rng, (enc_dim + emb_dim, hidden)), requires_grad=True, name="W1"),
            "b1": Tensor(np.zeros(hidden), requires_grad=True, name="b1"),
            "W2": Tensor(ad.xavier_uniform(rng, (hidden, hidden)), requires_grad=True, name="W2"),
            "b2": Tensor(np.zeros(hidden), requires_grad=True, name="b2"),
            "W3": Tensor(ad.xavier_uniform(rng, (hidden, skills)), requires_grad=True, name="W3"),
            "b3": Tensor(np.zeros(skills), requires_grad=True, name="b3"),
        }
        self.optimizer = Adam(self.parameters(), lr=lr)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"discriminator parameter {k!r}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, path) -> None:
        save_arrays(path, self.state_dict(), {"role": "discriminator", "skills": self.skills})

    def logits(self, source_enc, actions) -> Tensor:
        p = self.params
        x = ad.concat([ad.as_tensor(source_enc), ad.embedding(p["emb"], np.asarray(actions, dtype=np.int64))],
                      axis=-1)
        h = ad.tanh(x @ p["W1"] + p["b1"])
        h = ad.tanh(h @ p["W2"] + p["b2"])
        return h @ p["W3"] + p["b3"]

    def probs(self, source_enc, actions) -> np.ndarray:
        """q(. | x, a) for a batch, shape (B, K)."""
        with ad.no_grad():
            return ad.softmax(self.logits(source_enc, actions), axis=-1).data


def unsup_reward(disc: Discriminator, source_enc, actions, skills) -> np.ndarray:
    """r_z = log q(z | x, a) - log(1/K), with q clamped to [1e-8, 1]."""
    skills = np.asarray(skills, dtype=np.int64)
    if np.any(skills < 0) or np.any(skills >= disc.skills):
        raise ValueError(f"skill labels must lie in [0, {disc.skills})")
    q = disc.probs(np.atleast_2d(source_enc), np.atleast_1d(actions))
    picked = np.clip(q[np.arange(len(q)), np.atleast_1d(skills)], PROB_FLOOR, 1.0)
    return np.log(picked) + math.log(disc.skills)


def assign_skills(n_tokens: int, skills: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform skill label per sampled token."""
    if skills < 2:
        raise ValueError(f"skill count must be >= 2, got {skills}")
    return rng.integers(0, skills, size=n_tokens)


def discriminator_loss(disc: Discriminator, source_enc, actions, skills) -> Tensor:
    logp = ad.log_softmax(disc.logits(source_enc, actions), axis=-1)
    return -ad.mean(ad.gather(logp, np.asarray(skills, dtype=np.int64)))


def discriminator_update(disc: Discriminator, source_enc, actions, skills) -> float:
    """One Adam step on the skill cross-entropy; returns the pre-step loss (step skipped if non-finite)."""
    if len(np.atleast_1d(actions)) == 0:
        raise ValueError("empty discriminator batch")
    disc.optimizer.zero_grad()
    loss = discriminator_loss(disc, source_enc, actions, skills)
    if not np.isfinite(loss.item()):
        return loss.item()
    loss.backward()
    disc.optimizer.step()
    return loss.item()
