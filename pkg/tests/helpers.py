"""Shared fixtures for the core and acceptance tests."""

from types import SimpleNamespace

import numpy as np

from ris.core import Agent, RISHyperparams
from ris.env import make_maze, sample_free, success
from ris.replay import Batch

SMALL = dict(q_hidden=(16, 16), policy_hidden=(16, 16), highlevel_hidden=(16, 16), batch_size=32)


def small_agent(maze="u", seed=0, **hp):
    spec = make_maze(maze)
    return Agent(spec, RISHyperparams(**{**SMALL, **hp}), np.random.default_rng(seed))


def random_batch(spec, n, rng) -> Batch:
    """Free-space transitions with goals near or far; reward and done from success."""
    state = np.array([sample_free(spec, rng) for _ in range(n)])
    action = rng.uniform(-1, 1, size=(n, 2))
    next_state = np.clip(state + 0.75 * action, 0, spec.bounds)
    goal = np.array([sample_free(spec, rng) for _ in range(n)])
    # a few goals right next to the successor state
    near = rng.random(n) < 0.25
    goal[near] = next_state[near] + rng.uniform(-0.3, 0.3, size=(near.sum(), 2))
    bad = ~spec.is_free(goal)
    goal[bad] = next_state[bad]
    done = success(next_state, goal, spec)
    return Batch(
        state=state, action=action, reward=np.where(done, 0.0, -1.0), next_state=next_state,
        done=done, goal=goal, trajectory_id=np.zeros(n, int), index_in_trajectory=np.zeros(n, int),
        category=np.zeros(n, int), goal_slot=np.full(n, -1),
    )


def snapshot(agent) -> dict:
    return {k: t.data.copy() for k, t in agent.parameters().items()}


def changed_networks(agent, before: dict) -> set:
    return {k.split(".")[0] for k, t in agent.parameters().items() if not np.array_equal(t.data, before[k])}


def set_constant_output(params, value: float) -> None:
    """Zero the output layer weights and set its bias, so the MLP outputs ``value``."""
    last = max(int(k.split(".")[0][1:]) for k in params.names())
    params[f"l{last}.weight"].data[...] = 0.0
    params[f"l{last}.bias"].data[...] = value


class TabularAgent:
    """Stand-in exposing the pieces of Agent used by the subgoal cost.

    V(s, g) is minus the 4-connected step distance between the unit cells of
    s and g in a 5 x 5 world; the high-level policy is a fixed Laplace.
    """

    action_dim = 2

    def __init__(self, loc, log_scale, value_clip=(-100.0, 0.0), baseline_samples=10, size=5):
        self.loc = np.asarray(loc, float)
        self.log_scale = np.asarray(log_scale, float)
        self.size = size
        self.hp = SimpleNamespace(value_clip=value_clip, baseline_samples=baseline_samples)

    def cell(self, x):
        return np.clip(np.floor(x), 0, self.size - 1)

    def value_np(self, s, g, noise):
        return -np.abs(self.cell(s) - self.cell(g)).sum(axis=-1)

    def highlevel_np(self, s, g):
        shape = np.shape(s)
        return np.broadcast_to(self.loc, shape).copy(), np.broadcast_to(self.log_scale, shape).copy()
