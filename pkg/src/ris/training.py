"""The joint training loop, evaluation episodes and run artefacts."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as envlib
from .autodiff import decode_checkpoint, encode_checkpoint, mlp_layer_sizes, ParameterSet, parameter
from .config import TrainConfig, dump_config
from .core import Agent, RISHyperparams, train_step
from .env import MazeSpec
from .errors import ConfigurationError, RISError
from .oracle import SubgoalOracle, sample_pairs
from .replay import ReplayBuffer, Transition

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "env_steps", "train_success", "eval_success", "mean_return",
    "critic_loss", "highlevel_loss", "policy_kl", "subgoal_error",
)
# independent random streams, one per subsystem
STREAMS = ("init", "env", "replay", "explore", "update", "eval", "pairs")


def make_streams(seed: int) -> dict:
    """Counter-based (Philox) generator per subsystem, all derived from ``seed``."""
    return {
        name: np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i,))))
        for i, name in enumerate(STREAMS)
    }


def eval_generator(seed: int) -> np.random.Generator:
    return make_streams(seed)["eval"]


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    episodes: int


def evaluate(agent: Agent, spec: MazeSpec, episodes: int, rng: np.random.Generator,
             hardest: bool = True, jitter: float = 0.5) -> EvalResult:
    """Run ``episodes`` episodes with the deterministic (mean) action."""
    if episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    states = [envlib.reset_hardest(spec, rng, jitter) if hardest else envlib.reset(spec, rng) for _ in range(episodes)]
    returns = np.zeros(episodes)
    solved = np.zeros(episodes, dtype=bool)
    active = np.ones(episodes, dtype=bool)
    for _ in range(spec.episode_limit):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pos = np.array([states[i].position for i in idx])
        goal = np.array([states[i].goal for i in idx])
        actions = agent.act(pos, goal)
        for k, i in enumerate(idx):
            states[i], r, done = envlib.step(spec, states[i], actions[k])
            returns[i] += r
            if done:
                active[i] = False
                solved[i] = r == 0.0
    return EvalResult(float(solved.mean()), float(returns.mean()), episodes)


# --- checkpoints -----------------------------------------------------------


def checkpoint_bytes(agent: Agent) -> bytes:
    return encode_checkpoint(dict(agent.parameters().items()))


def save_agent(agent: Agent, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(agent))


def _net_hidden(arrays, net: str) -> tuple:
    sub = ParameterSet((k[len(net) + 1:], parameter(v)) for k, v in arrays.items() if k.startswith(net + "."))
    if len(sub) == 0:
        raise ConfigurationError(f"checkpoint has no tensors for network {net!r}")
    return tuple(mlp_layer_sizes(sub)[1:-1])


def load_agent(path, spec: MazeSpec, hp: RISHyperparams = None) -> Agent:
    """Rebuild an agent from a checkpoint; hidden sizes come from the stored shapes."""
    arrays = decode_checkpoint(Path(path).read_bytes())
    base = hp or RISHyperparams()
    hp = RISHyperparams(**{
        **base.__dict__,
        "q_hidden": _net_hidden(arrays, "q1"),
        "policy_hidden": _net_hidden(arrays, "policy"),
        "highlevel_hidden": _net_hidden(arrays, "highlevel"),
    })
    agent = Agent(spec, hp, np.random.default_rng(0))
    agent.load_arrays(arrays)
    return agent


# --- training --------------------------------------------------------------


@dataclass
class TrainResult:
    agent: Agent
    metrics: list = field(default_factory=list)
    out_dir: Path = None


def _fmt(x: float) -> str:
    return repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x))


def format_metrics_row(row: dict) -> list:
    return [_fmt(row[k]) for k in METRICS_HEADER]


def _nanmean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else float("nan")


class _MetricsWriter:
    def __init__(self, path: Path):
        self.path = path
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(format_metrics_row(row))


def train(config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Collect one env step, then (after warmup) one update of Q, high-level policy and policy.

    With ``out_dir`` set, writes ``config.ini``, ``metrics.csv``, periodic
    checkpoints under ``checkpoints/`` and ``final.ris``.
    """
    config.validate()
    spec = config.maze_spec()
    hp = config.agent
    rngs = make_streams(config.seed)
    agent = Agent(spec, hp, rngs["init"])
    buffer = ReplayBuffer(config.buffer_size, agent.state_dim, agent.action_dim)
    starts, goals = sample_pairs(spec, config.subgoal_pairs, rngs["pairs"]) if config.subgoal_pairs else ((), ())
    oracle = SubgoalOracle(spec, starts, goals) if config.subgoal_pairs else None

    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "config.ini").write_text(dump_config(config), encoding="utf-8")
        writer = _MetricsWriter(out_dir / "metrics.csv")

    result = TrainResult(agent=agent, out_dir=out_dir)
    state = envlib.reset(spec, rngs["env"])
    episode: list = []
    finished, solved = 0, 0
    losses = {"critic_loss": [], "highlevel_loss": [], "policy_kl": []}
    t0 = time.time()
    ckpt_every = config.checkpoint_every or config.eval_every

    for env_steps in range(1, config.total_env_steps + 1):
        if env_steps <= config.warmup_steps:
            action = rngs["explore"].uniform(-1.0, 1.0, size=agent.action_dim)
        else:
            noise = rngs["explore"].standard_normal(agent.action_dim)
            action = agent.act(state.position[None], state.goal[None], noise[None])[0]
        nxt, reward, done = envlib.step(spec, state, action)
        episode.append(Transition(state.position, action, reward, nxt.position, done, state.goal))
        state = nxt
        if done:
            buffer.push_trajectory(episode)
            finished += 1
            solved += reward == 0.0
            episode = []
            state = envlib.reset(spec, rngs["env"])

        if env_steps > config.warmup_steps and len(buffer) > 0:
            batch = buffer.sample_her(hp.batch_size, rngs["replay"], spec)
            candidates = buffer.sample_subgoal_candidates(hp.batch_size, rngs["replay"])
            try:
                stats = train_step(agent, batch, candidates, rngs["update"])
            except RISError as exc:
                raise type(exc)(f"{exc} [seed={config.seed} env_steps={env_steps}]") from exc
            losses["critic_loss"].append(stats.critic_loss)
            losses["highlevel_loss"].append(stats.highlevel_loss)
            losses["policy_kl"].append(stats.policy_kl)

        last = env_steps == config.total_env_steps
        if env_steps % config.eval_every == 0 or last:
            ev = evaluate(agent, spec, config.eval_episodes, rngs["eval"], hardest=spec.hardest is not None,
                          jitter=config.eval_jitter)
            row = {
                "env_steps": env_steps,
                "train_success": solved / finished if finished else float("nan"),
                "eval_success": ev.success_rate,
                "mean_return": ev.mean_return,
                "critic_loss": _nanmean(losses["critic_loss"]),
                "highlevel_loss": _nanmean(losses["highlevel_loss"]),
                "policy_kl": _nanmean(losses["policy_kl"]),
                "subgoal_error": oracle.error(agent.mean_subgoal(starts, goals)) if oracle else float("nan"),
            }
            result.metrics.append(row)
            finished, solved = 0, 0
            losses = {k: [] for k in losses}
            if writer:
                writer.append(row)
            log.info(
                "step %d eval_success %.2f subgoal_error %.2f (%.0fs)",
                env_steps, row["eval_success"], row["subgoal_error"], time.time() - t0,
            )
            if progress:
                progress(row)
        if out_dir is not None and (env_steps % ckpt_every == 0 or last):
            save_agent(agent, out_dir / "checkpoints" / f"step_{env_steps:08d}.ris")
    if out_dir is not None:
        save_agent(agent, out_dir / "final.ris")
    return result


def read_metrics(path) -> list:
    """Parse a metrics.csv; raises ValueError on a malformed or empty file."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
    rows = [{k: float(v) for k, v in r.items()} for r in reader]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows
