"""Trajectory-aware ring buffer with hindsight goal relabelling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import MazeSpec, success
from .errors import ConfigurationError, UsageError

# relabel categories
ORIGINAL, RANDOM, FUTURE = 0, 1, 2
HER_PROBS = (0.2, 0.4, 0.4)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    goal: np.ndarray
    trajectory_id: int = -1
    index_in_trajectory: int = -1


@dataclass
class Batch:
    """Columns of a sampled minibatch. After relabelling ``done`` marks success only."""

    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    done: np.ndarray
    goal: np.ndarray
    trajectory_id: np.ndarray
    index_in_trajectory: np.ndarray
    category: np.ndarray
    # buffer slot whose state became the goal; -1 when the original goal was kept
    goal_slot: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)


class ReplayBuffer:
    """Stores whole episodes contiguously; evicts the oldest episode first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ConfigurationError("capacity must be positive")
        self.capacity = int(capacity)
        self.state = np.zeros((capacity, state_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.next_state = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.goal = np.zeros((capacity, state_dim))
        self.traj_id = np.full(capacity, -1, dtype=np.int64)
        self.traj_index = np.zeros(capacity, dtype=np.int64)
        self.traj_len = np.zeros(capacity, dtype=np.int64)
        self._episodes: deque = deque()  # (trajectory_id, start_slot, length)
        self._head = 0  # slot of the oldest stored transition
        self.size = 0
        self._next_id = 0

    def __len__(self) -> int:
        return self.size

    @property
    def num_trajectories(self) -> int:
        return len(self._episodes)

    def trajectory_ids(self) -> list:
        return [e[0] for e in self._episodes]

    def push_trajectory(self, transitions: Sequence[Transition]) -> int:
        n = len(transitions)
        if n == 0:
            raise UsageError("cannot store an empty trajectory")
        if n > self.capacity:
            raise ConfigurationError(f"episode of length {n} exceeds buffer capacity {self.capacity}")
        while self.size + n > self.capacity:
            _, _, length = self._episodes.popleft()
            self._head = (self._head + length) % self.capacity
            self.size -= length
        tid = self._next_id
        self._next_id += 1
        start = (self._head + self.size) % self.capacity
        slots = (start + np.arange(n)) % self.capacity
        self.state[slots] = [t.state for t in transitions]
        self.action[slots] = [t.action for t in transitions]
        self.reward[slots] = [t.reward for t in transitions]
        self.next_state[slots] = [t.next_state for t in transitions]
        self.done[slots] = [t.done for t in transitions]
        self.goal[slots] = [t.goal for t in transitions]
        self.traj_id[slots] = tid
        self.traj_index[slots] = np.arange(n)
        self.traj_len[slots] = n
        self._episodes.append((tid, start, n))
        self.size += n
        return tid

    def _uniform_slots(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise UsageError("replay buffer is empty")
        return (self._head + rng.integers(0, self.size, size=n)) % self.capacity

    def transition(self, slot: int) -> Transition:
        return Transition(
            self.state[slot].copy(), self.action[slot].copy(), float(self.reward[slot]),
            self.next_state[slot].copy(), bool(self.done[slot]), self.goal[slot].copy(),
            int(self.traj_id[slot]), int(self.traj_index[slot]),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform minibatch with the stored goals, rewards and done flags."""
        slots = self._uniform_slots(batch_size, rng)
        return self._gather(slots, self.goal[slots].copy(), self.reward[slots].copy(),
                            self.done[slots].copy(), np.full(batch_size, ORIGINAL), np.full(batch_size, -1))

    def sample_her(self, batch_size: int, rng: np.random.Generator, spec: MazeSpec) -> Batch:
        """Relabel each draw: 20% original goal, 40% random stored state, 40% later state of the same episode."""
        slots = self._uniform_slots(batch_size, rng)
        category = rng.choice(3, size=batch_size, p=HER_PROBS)
        goal = self.goal[slots].copy()
        goal_slot = np.full(batch_size, -1, dtype=np.int64)

        rand = category == RANDOM
        goal_slot[rand] = self._uniform_slots(int(rand.sum()), rng)

        idx = self.traj_index[slots]
        length = self.traj_len[slots]
        fut = (category == FUTURE) & (idx < length - 1)
        # uniform over strictly later indices idx+1 .. length-1
        later = idx[fut] + 1 + np.floor(rng.random(int(fut.sum())) * (length[fut] - 1 - idx[fut])).astype(np.int64)
        goal_slot[fut] = (slots[fut] - idx[fut] + later) % self.capacity
        relabelled = goal_slot >= 0
        goal[relabelled] = self.state[goal_slot[relabelled]]

        hit = success(self.next_state[slots], goal, spec)
        reward = np.where(hit, 0.0, -1.0)
        return self._gather(slots, goal, reward, hit, category, goal_slot)

    def sample_subgoal_candidates(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return self.state[self._uniform_slots(batch_size, rng)].copy()

    def _gather(self, slots, goal, reward, done, category, goal_slot) -> Batch:
        return Batch(
            state=self.state[slots].copy(), action=self.action[slots].copy(), reward=reward,
            next_state=self.next_state[slots].copy(), done=done, goal=goal,
            trajectory_id=self.traj_id[slots].copy(), index_in_trajectory=self.traj_index[slots].copy(),
            category=category, goal_slot=goal_slot,
        )
