"""Training configuration and the YAML config file schema.

A config file has up to three top-level sections::

    train:   TrainConfig fields (hyperparameters)
    data:    train_src, train_tgt, valid_src, valid_tgt, [mlt_valid]
    synth:   SynthTaskSpec fields (used by gen-synth)

Command-line flags override file values, which override the defaults below.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

MODES = ("mle", "sac-bleu", "sac-unsup")


class ConfigError(ValueError):
    """Invalid configuration; carries every problem found."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class TrainConfig:
    alpha: float = 0.01             # entropy temperature (fixed)
    gamma: float = 0.99
    tau: float = 0.005
    lambda_mle: float = 0.1
    lr_actor_pretrain: float = 4e-4
    lr_critic_pretrain: float = 3e-4
    lr_joint: float = 4e-4          # actor and critics during SAC training
    lr_disc: float = 1e-4
    weight_decay: float = 1e-5
    buffer_size: int = 1000
    batch_size: int = 64
    actor_patience: int = 10
    actor_max_epochs: int = 100
    critic_epochs: int = 5
    sac_patience: int = 10
    sac_max_epochs: int = 50
    lr_patience: int = 2
    updates_per_batch: int = 1          # gradient steps per collected batch of trajectories
    sample_temperature: float = 1.0     # behaviour policy for supervised rollouts; 1 samples the actor itself
    clip_norm: float = 1.0
    length_penalty: float = 1e-4
    reward_scale: float | None = None   # None: divide rewards by alpha
    skills: int = 4
    unsup_update: str = "oracle"        # oracle (Monte-Carlo Q estimates) | pg (plain policy gradient)
    auto_alpha: bool = False
    target_entropy: float = 1.0
    emb_dim: int = 200
    hidden_dim: int = 320
    disc_emb_dim: int = 32
    disc_hidden: int = 100
    max_nan_skips: int = 3
    seed: int = 1234

    def problems(self) -> list[str]:
        out = []
        positive = ("gamma", "tau", "sample_temperature", "lr_actor_pretrain", "lr_critic_pretrain", "lr_joint",
                    "lr_disc", "clip_norm")
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                out.append(f"{name} must be a positive number, got {v!r}")
        for name in ("alpha", "lambda_mle", "weight_decay", "length_penalty"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                out.append(f"{name} must be a non-negative number, got {v!r}")
        if isinstance(self.gamma, (int, float)) and self.gamma > 1:
            out.append(f"gamma must be <= 1, got {self.gamma}")
        if isinstance(self.tau, (int, float)) and self.tau > 1:
            out.append(f"tau must be <= 1, got {self.tau}")
        for name in ("buffer_size", "batch_size", "actor_max_epochs", "sac_max_epochs", "emb_dim", "hidden_dim",
                     "disc_emb_dim", "disc_hidden", "max_nan_skips", "updates_per_batch"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                out.append(f"{name} must be a positive integer, got {v!r}")
        for name in ("actor_patience", "critic_epochs", "sac_patience", "lr_patience"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 0):
                out.append(f"{name} must be a non-negative integer, got {v!r}")
        if not (isinstance(self.skills, int) and self.skills >= 2):
            out.append(f"skills must be an integer >= 2, got {self.skills!r}")
        if self.unsup_update not in ("oracle", "pg"):
            out.append(f"unsup_update must be 'oracle' or 'pg', got {self.unsup_update!r}")
        if self.reward_scale is None and self.alpha == 0:
            out.append("alpha = 0 needs an explicit reward_scale")
        if self.reward_scale is not None and not self.reward_scale > 0:
            out.append(f"reward_scale must be positive, got {self.reward_scale!r}")
        if not isinstance(self.seed, int):
            out.append(f"seed must be an integer, got {self.seed!r}")
        return out

    def validate(self) -> TrainConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def scale(self) -> float:
        """Multiplier applied to every reward."""
        return self.reward_scale if self.reward_scale is not None else 1.0 / self.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError([f"unknown train option {k!r}" for k in unknown])
        cfg = cls(**values)
        # YAML reads 1e-4 as a string under YAML 1.1 rules
        for f in fields(cls):
            v = getattr(cfg, f.name)
            if isinstance(v, str) and (isinstance(f.default, float) or f.name == "reward_scale"):
                try:
                    setattr(cfg, f.name, float(v))
                except ValueError:
                    pass    # reported by problems()
            elif isinstance(v, int) and not isinstance(v, bool) and isinstance(f.default, float):
                setattr(cfg, f.name, float(v))
        return cfg


DATA_KEYS = ("train_src", "train_tgt", "valid_src", "valid_tgt", "mlt_valid")
SECTIONS = ("train", "data", "synth")


def load_config_file(path: str | Path) -> dict:
    """Read a YAML config into its sections (missing sections become empty dicts)."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    problems = [f"unknown section {k!r}" for k in raw if k not in SECTIONS]
    out = {}
    for section in SECTIONS:
        value = raw.get(section) or {}
        if not isinstance(value, dict):
            problems.append(f"section {section!r} must be a mapping")
            value = {}
        out[section] = value
    problems += [f"unknown data key {k!r}" for k in out["data"] if k not in DATA_KEYS]
    if problems:
        raise ConfigError(problems)
    return out
