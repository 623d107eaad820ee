"""Ring-buffer experience replay with uniform sampling and a recent-window view."""

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .errors import InvalidInputError
from .learner import Batch


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    cost: float
    next_state: np.ndarray
    terminated: bool
    truncated: bool
    step_index: int

    def validate(self) -> None:
        if self.cost < 0.0:
            raise InvalidInputError(f"成本必须非负, 实际 {self.cost}")
        values = (self.state, self.action, self.next_state, self.reward, self.cost)
        if not all(np.all(np.isfinite(v)) for v in values):
            raise InvalidInputError("转移包含非有限值")


class ReplayBuffer:
    """Fixed-capacity storage; the oldest entries are overwritten first."""

    FIELDS = ("states", "actions", "rewards", "costs", "next_states",
              "terminated", "truncated", "step_index")

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, seed: int = 0):
        if capacity < 1:
            raise InvalidInputError("缓冲区容量必须 >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.costs = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.terminated = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.step_index = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> None:
        transition.validate()
        i = self.cursor
        self.states[i] = transition.state
        self.actions[i] = transition.action
        self.rewards[i] = transition.reward
        self.costs[i] = transition.cost
        self.next_states[i] = transition.next_state
        self.terminated[i] = transition.terminated
        self.truncated[i] = transition.truncated
        self.step_index[i] = transition.step_index
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if self.size == 0:
            raise InvalidInputError("缓冲区为空, 无法采样")
        return self.rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int) -> Batch:
        idx = self.sample_indices(batch_size)
        return Batch(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            costs=self.costs[idx],
            next_states=self.next_states[idx],
            terminated=self.terminated[idx].astype(np.float64),
        )

    def _recent_indices(self, window: int) -> np.ndarray:
        count = min(window, self.size)
        return (self.cursor - 1 - np.arange(count)) % self.capacity

    def recent(self, window: int) -> List[Transition]:
        """Last `window` insertions (all of them if fewer), newest first."""
        if window < 0:
            raise InvalidInputError("窗口大小必须非负")
        return [
            Transition(
                state=self.states[i].copy(), action=self.actions[i].copy(),
                reward=float(self.rewards[i]), cost=float(self.costs[i]),
                next_state=self.next_states[i].copy(),
                terminated=bool(self.terminated[i]), truncated=bool(self.truncated[i]),
                step_index=int(self.step_index[i]),
            )
            for i in self._recent_indices(window)
        ]

    def recent_costs(self, window: int) -> np.ndarray:
        """Per-step costs of the last `window` insertions, newest first."""
        return self.costs[self._recent_indices(window)].copy()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"replay/{name}": getattr(self, name)[:self.size].copy() for name in self.FIELDS}

    def state_meta(self) -> Dict:
        return {"cursor": self.cursor, "size": self.size, "rng": self.rng.bit_generator.state}

    def load_state(self, arrays: Dict[str, np.ndarray], meta: Dict) -> None:
        size = int(meta["size"])
        if size > self.capacity:
            raise InvalidInputError("检查点中的缓冲区超过当前容量")
        for name in self.FIELDS:
            stored = arrays[f"replay/{name}"]
            target = getattr(self, name)
            if stored.shape[1:] != target.shape[1:]:
                raise InvalidInputError(f"缓冲区字段 {name} 形状不匹配")
            target[:size] = stored
        self.size = size
        self.cursor = int(meta["cursor"])
        self.rng.bit_generator.state = meta["rng"]
