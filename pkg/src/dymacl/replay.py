"""Per-task replay buffers, uniform sampling and zero-padding of observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Observation
from .errors import ContractError, NotReadyError, ProtocolError, ShapeError

DEFAULT_CAPACITY = 100_000
DEFAULT_MIN_FILL = 5000


@dataclass(frozen=True)
class Transition:
    """One joint step of the learning team.

    Per-agent lists are aligned: entry ``i`` belongs to the i-th agent that
    was alive when the step began.  ``next_observations[i]`` is ``None``
    when that agent died; ``agent_done[i]`` is true when its value must not
    be bootstrapped.  ``hidden`` and ``next_hidden`` are the recurrent
    states the acting network used, shape (n_agents, hidden_units).
    """

    task_id: int
    observations: tuple[Observation, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    team_reward: float
    next_observations: tuple[Observation | None, ...]
    agent_done: tuple[bool, ...]
    done: bool
    hidden: np.ndarray
    next_hidden: np.ndarray

    def __post_init__(self):
        n = len(self.observations)
        if not (len(self.actions) == len(self.rewards) == len(self.next_observations)
                == len(self.agent_done) == n):
            raise ContractError("per-agent fields of a transition must align")
        if self.hidden.shape[0] != n or self.next_hidden.shape[0] != n:
            raise ContractError("hidden states must have one row per agent")

    @property
    def n_agents(self) -> int:
        return len(self.observations)


class TaskBuffer:
    """Ring buffer holding the transitions of one curriculum task."""

    def __init__(self, task_id: int, capacity: int = DEFAULT_CAPACITY,
                 min_fill: int = DEFAULT_MIN_FILL):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.task_id = task_id
        self.capacity = capacity
        self.min_fill = min_fill
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    @property
    def fill(self) -> int:
        return len(self._items)

    @property
    def ready(self) -> bool:
        return self.fill >= max(1, self.min_fill)

    def push(self, transition: Transition) -> None:
        if transition.task_id != self.task_id:
            raise ProtocolError(
                f"transition of task {transition.task_id} pushed to buffer of task {self.task_id}"
            )
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]

    def sample(self, b: int, rng: np.random.Generator) -> list[Transition]:
        if not self.ready:
            raise NotReadyError(
                f"buffer for task {self.task_id} holds {self.fill} < {max(1, self.min_fill)} transitions",
                task_id=self.task_id,
            )
        # Snapshot first so concurrent pushes cannot shift indices.
        items = list(self._items)
        idx = rng.integers(0, len(items), size=b)
        return [items[int(i)] for i in idx]


def sample(buffer: TaskBuffer, b: int, rng: np.random.Generator) -> list[Transition]:
    return buffer.sample(b, rng)


def multi_sample(buffers, b: int, rng: np.random.Generator) -> list[list[Transition]]:
    """Draw ``b`` transitions from every buffer, in buffer order."""
    for buf in buffers:
        if not buf.ready:
            raise NotReadyError(f"buffer for task {buf.task_id} is not ready", task_id=buf.task_id)
    return [buf.sample(b, rng) for buf in buffers]


def pad_to(obs: Observation, teammate_slots: int, enemy_slots: int) -> np.ndarray:
    """Flatten ``obs`` with neighbor lists zero-padded to fixed slot counts."""
    if obs.n_teammates > teammate_slots:
        raise ShapeError(f"{obs.n_teammates} teammates exceed {teammate_slots} slots")
    if obs.n_enemies > enemy_slots:
        raise ShapeError(f"{obs.n_enemies} enemies exceed {enemy_slots} slots")
    width = obs.teammate_features.shape[1]
    mates = np.zeros((teammate_slots, width))
    mates[:obs.n_teammates] = obs.teammate_features
    enemies = np.zeros((enemy_slots, obs.enemy_features.shape[1]))
    enemies[:obs.n_enemies] = obs.enemy_features
    return np.concatenate([obs.env_features, obs.self_features,
                           mates.reshape(-1), enemies.reshape(-1)])
