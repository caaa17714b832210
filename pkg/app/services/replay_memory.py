import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from app import metrics
from app.exceptions import InvalidArgumentException, StateException
from app.schemas.config import ReplayConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Experience:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    reward: float
    goal: np.ndarray = field(default_factory=lambda: np.zeros(0))
    done: bool = False
    # optional provenance for reward audits: (state histogram, next histogram, goal id)
    audit: Optional[tuple[Any, Any, int]] = None

    def __post_init__(self) -> None:
        finite = (
            np.all(np.isfinite(self.state))
            and np.all(np.isfinite(self.next_state))
            and np.all(np.isfinite(self.goal))
            and np.isfinite(self.reward)
        )
        if not finite:
            raise InvalidArgumentException("Experience contains non-finite values")


@dataclass
class SampledBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    goals: np.ndarray
    dones: np.ndarray
    indices: np.ndarray
    weights: np.ndarray


class SumTree:
    """Array sum tree over a power-of-two number of leaves; node i has children 2i, 2i+1."""

    def __init__(self, capacity: int) -> None:
        if capacity <= 0:
            raise InvalidArgumentException("capacity must be positive", capacity=capacity)
        self.capacity = capacity
        self.leaves = 1 << max(0, (capacity - 1).bit_length())
        self.tree = np.zeros(2 * self.leaves, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def get(self, slots: np.ndarray) -> np.ndarray:
        return self.tree[self.leaves + np.asarray(slots)]

    def update(self, slots: np.ndarray, priorities: np.ndarray) -> None:
        nodes = self.leaves + np.atleast_1d(np.asarray(slots, dtype=np.int64))
        self.tree[nodes] = priorities
        nodes = np.unique(nodes // 2)
        while nodes[0] >= 1:
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]
            if nodes[0] == 1:
                break
            nodes = np.unique(nodes // 2)

    def rebuild(self) -> None:
        level_start = self.leaves
        while level_start > 1:
            parents = np.arange(level_start // 2, level_start)
            self.tree[parents] = self.tree[2 * parents] + self.tree[2 * parents + 1]
            level_start //= 2

    def find(self, values: np.ndarray) -> np.ndarray:
        """Leaf slots whose cumulative priority interval contains each value."""
        values = np.asarray(values, dtype=np.float64).copy()
        nodes = np.ones(len(values), dtype=np.int64)
        while nodes[0] < self.leaves:
            left = 2 * nodes
            go_right = values >= self.tree[left]
            values = np.where(go_right, values - self.tree[left], values)
            nodes = np.where(go_right, left + 1, left)
        return nodes - self.leaves


def beta_schedule(step: int, total_steps: int, beta0: float) -> float:
    """Linear increase from beta0 to 1 over total_steps."""
    if total_steps <= 0:
        return 1.0
    return beta0 + (1.0 - beta0) * min(1.0, step / total_steps)


class PrioritizedReplayBuffer:
    """Proportional prioritized replay on a ring buffer.

    Indices handed out by ``sample`` are global insertion sequence numbers;
    an index whose item has been overwritten is stale.
    """

    def __init__(self, config: Optional[ReplayConfig] = None) -> None:
        self.config = config or ReplayConfig()
        self.alpha = self.config.alpha if self.config.prioritized else 0.0
        self.capacity = self.config.capacity
        self.tree = SumTree(self.capacity)
        self.max_priority = 1.0
        self.next_sequence = 0
        self.stale_updates = 0
        self._updates_since_rebuild = 0
        self._sequence = np.full(self.capacity, -1, dtype=np.int64)
        self._items: list[Optional[Experience]] = [None] * self.capacity
        self._arrays: Optional[dict[str, np.ndarray]] = None

    def __len__(self) -> int:
        return min(self.next_sequence, self.capacity)

    def _allocate(self, exp: Experience) -> dict[str, np.ndarray]:
        return {
            "states": np.zeros((self.capacity, len(exp.state))),
            "next_states": np.zeros((self.capacity, len(exp.next_state))),
            "goals": np.zeros((self.capacity, len(exp.goal))),
            "actions": np.zeros(self.capacity, dtype=np.int64),
            "rewards": np.zeros(self.capacity),
            "dones": np.zeros(self.capacity, dtype=bool),
        }

    def insert(self, exp: Experience, origin: str = "pursued") -> int:
        """Store with the current maximum priority; returns the sequence number."""
        if self._arrays is None:
            self._arrays = self._allocate(exp)
        slot = self.next_sequence % self.capacity
        arrays = self._arrays
        arrays["states"][slot] = exp.state
        arrays["next_states"][slot] = exp.next_state
        arrays["goals"][slot] = exp.goal
        arrays["actions"][slot] = exp.action
        arrays["rewards"][slot] = exp.reward
        arrays["dones"][slot] = exp.done
        self._items[slot] = exp
        self._sequence[slot] = self.next_sequence
        self.tree.update(np.array([slot]), np.array([self.max_priority]))
        self.next_sequence += 1
        metrics.replay_inserts_total.labels(origin=origin).inc()
        return self.next_sequence - 1

    def is_stale(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        return (indices < self.next_sequence - self.capacity) | (
            indices >= self.next_sequence
        ) | (indices < 0)

    def priority(self, indices: np.ndarray) -> np.ndarray:
        return self.tree.get(np.asarray(indices) % self.capacity)

    def experience(self, index: int) -> Experience:
        if self.is_stale(np.array([index]))[0]:
            raise StateException("Replay index is stale", details={"index": int(index)})
        item = self._items[index % self.capacity]
        assert item is not None
        return item

    def experiences(self) -> list[Experience]:
        """Stored experiences, oldest first."""
        start = max(0, self.next_sequence - self.capacity)
        return [self.experience(i) for i in range(start, self.next_sequence)]

    def sample(
        self, batch_size: int, beta: float, rng: np.random.Generator
    ) -> SampledBatch:
        size = len(self)
        if size < batch_size or size == 0:
            raise StateException(
                "Replay buffer holds fewer items than the batch size",
                details={"size": size, "batch_size": batch_size},
            )
        total = self.tree.total
        values = rng.random(batch_size) * total
        slots = np.minimum(self.tree.find(values), size - 1)
        priorities = self.tree.get(slots)
        probabilities = priorities / total
        weights = (size * probabilities) ** (-beta)
        weights = weights / weights.max()

        arrays = self._arrays
        assert arrays is not None
        return SampledBatch(
            states=arrays["states"][slots],
            actions=arrays["actions"][slots],
            next_states=arrays["next_states"][slots],
            rewards=arrays["rewards"][slots],
            goals=arrays["goals"][slots],
            dones=arrays["dones"][slots],
            indices=self._sequence[slots].copy(),
            weights=weights,
        )

    def update_priorities(self, indices: np.ndarray, td_errors: np.ndarray) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        td_errors = np.abs(np.asarray(td_errors, dtype=np.float64))
        stale = self.is_stale(indices)
        if np.any(stale):
            self.stale_updates += int(stale.sum())
            logger.warning(
                "Skipped stale priority updates count=%s",
                int(stale.sum()),
                extra={"stale": int(stale.sum())},
            )
        fresh = ~stale
        if not np.any(fresh):
            return
        priorities = (td_errors[fresh] + self.config.priority_eps) ** self.alpha
        self.tree.update(indices[fresh] % self.capacity, priorities)
        self.max_priority = max(self.max_priority, float(priorities.max()))

        self._updates_since_rebuild += int(fresh.sum())
        if self._updates_since_rebuild >= self.config.rebuild_interval:
            self.tree.rebuild()
            self._updates_since_rebuild = 0

    def dump_lines(self) -> list[str]:
        """One text line per stored experience, oldest first."""
        lines = []
        start = max(0, self.next_sequence - self.capacity)
        for index in range(start, self.next_sequence):
            exp = self.experience(index)
            fields = [
                str(index),
                repr(float(self.priority(np.array([index]))[0])),
                str(exp.action),
                repr(float(exp.reward)),
                str(int(exp.done)),
                " ".join(repr(float(v)) for v in exp.state),
                " ".join(repr(float(v)) for v in exp.next_state),
                " ".join(repr(float(v)) for v in exp.goal),
            ]
            lines.append(" | ".join(fields))
        return lines
