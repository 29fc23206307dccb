from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class Transition:
    """One decoding step: state = (source, prefix), action, shaped reward, next state = prefix + action."""

    source: tuple[int, ...]
    prefix: tuple[int, ...]
    action: int
    reward: float
    done: bool
    reference: tuple[int, ...] | None = None
    skill: int | None = None


class ReplayBuffer:
    """Bounded FIFO store sampled uniformly with replacement."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: deque[tuple[int, Transition]] = deque(maxlen=capacity)
        self._counter = 0

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Transition]:
        return (t for _, t in self._items)

    def add(self, transition: Transition) -> None:
        self._items.append((self._counter, transition))
        self._counter += 1

    def extend(self, transitions) -> None:
        for t in transitions:
            self.add(t)

    def insertion_ids(self) -> list[int]:
        """Monotone insertion counters of the stored items, oldest first."""
        return [i for i, _ in self._items]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        return [self._items[i][1] for i in self.sample_indices(batch_size, rng)]
