"""Rollout records and the FIFO replay memory."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator, List, Optional

import numpy as np


@dataclass
class RolloutRecord:
    """One transition.

    ``obs`` is whatever the policy consumes; ``u_pre`` the (sampled) network
    output before projection and ``u_post`` its projection, whose first
    block is executed.  ``C`` is the constraint set the projection used, so
    ``u_post`` can be re-checked offline.
    """

    obs: np.ndarray
    u_pre: np.ndarray
    u_post: np.ndarray
    cost: float
    C: Any = None
    x: Optional[np.ndarray] = None
    w_hat: Optional[np.ndarray] = None
    logprob: float = 0.0
    timestamp: Optional[np.datetime64] = None
    extra: dict = field(default_factory=dict)


class ReplayMemory:
    """Ring buffer with FIFO eviction and batch sampling without replacement."""

    def __init__(self, capacity: int, rng: Optional[np.random.Generator] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._buf: List[RolloutRecord] = []
        self._head = 0  # index of the oldest record once full
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.total_appended = 0

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, i: int) -> RolloutRecord:
        """i-th record in insertion order (0 = oldest)."""
        n = len(self._buf)
        if not -n <= i < n:
            raise IndexError(i)
        return self._buf[(self._head + i) % n]

    def __iter__(self) -> Iterator[RolloutRecord]:
        return (self[i] for i in range(len(self._buf)))

    def append(self, record: RolloutRecord) -> None:
        if len(self._buf) < self.capacity:
            self._buf.append(record)
        else:
            self._buf[self._head] = record
            self._head = (self._head + 1) % self.capacity
        self.total_appended += 1

    def clear(self) -> None:
        self._buf = []
        self._head = 0

    def recent(self, n: int) -> List[RolloutRecord]:
        n = min(n, len(self._buf))
        return [self[i] for i in range(len(self._buf) - n, len(self._buf))]

    def sample(self, batch_size: int) -> List[RolloutRecord]:
        if not self._buf:
            raise ValueError("cannot sample from an empty memory")
        size = min(batch_size, len(self._buf))
        idx = self.rng.choice(len(self._buf), size=size, replace=False)
        return [self._buf[int(i)] for i in idx]
