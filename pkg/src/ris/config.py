"""Run configuration: a flat ``key = value`` file with section headers.

Sections are ``[maze]``, ``[agent]`` and ``[run]``. Every key maps to one
field of :class:`TrainConfig`; unknown keys and malformed values are rejected
before anything runs. :func:`dump_config` writes the same format back, so a
snapshot reproduces its run.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .core import PriorMode, RISHyperparams
from .env import MazeSpec, make_maze, maze_from_rects
from .errors import ConfigurationError

MAZE_KEYS = ("maze", "bounds", "walls", "success_radius", "max_step", "episode_limit", "hardest")
RUN_KEYS = (
    "seed", "total_env_steps", "warmup_steps", "eval_every", "eval_episodes", "eval_jitter",
    "subgoal_pairs", "buffer_size", "out_dir", "checkpoint_every",
)


@dataclass
class TrainConfig:
    # maze
    maze: str = "u"
    bounds: tuple = ()
    walls: tuple = ()
    success_radius: float = 0.5
    max_step: float = 0.75
    episode_limit: int = 100
    hardest: tuple = ()
    # agent: see RISHyperparams
    agent: RISHyperparams = field(default_factory=RISHyperparams)
    # run
    seed: int = 0
    total_env_steps: int = 200_000
    warmup_steps: int = 10_000
    eval_every: int = 5_000
    eval_episodes: int = 50
    eval_jitter: float = 0.5
    subgoal_pairs: int = 100
    buffer_size: int = 1_000_000
    out_dir: str = "runs/default"
    checkpoint_every: int = 0  # 0: at every evaluation

    def __post_init__(self):
        self.validate()

    @property
    def prior_mode(self) -> PriorMode:
        return self.agent.prior_mode

    def validate(self) -> None:
        self.agent.validate()
        for name in ("total_env_steps", "eval_every", "eval_episodes", "buffer_size", "episode_limit"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"[run] {name} must be >= 1, got {getattr(self, name)}")
        for name in ("warmup_steps", "subgoal_pairs", "checkpoint_every"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"[run] {name} must be >= 0")
        if self.eval_jitter < 0:
            raise ConfigurationError("[run] eval_jitter must be >= 0")
        if self.buffer_size < self.episode_limit:
            raise ConfigurationError("[run] buffer_size must hold at least one full episode")
        self.maze_spec()

    def maze_spec(self) -> MazeSpec:
        kw = dict(success_radius=float(self.success_radius), max_step=float(self.max_step),
                  episode_limit=int(self.episode_limit))
        if self.maze == "custom":
            if not self.bounds:
                raise ConfigurationError("[maze] custom maze needs bounds")
            hardest = tuple(tuple(p) for p in self.hardest) if self.hardest else None
            return maze_from_rects(self.bounds, self.walls, name="custom", hardest=hardest, **kw)
        base = make_maze(self.maze)
        hardest = tuple(tuple(p) for p in self.hardest) if self.hardest else base.hardest
        return dataclasses.replace(base, hardest=hardest, **kw)

    def with_overrides(self, **changes) -> "TrainConfig":
        agent_fields = {f.name for f in dataclasses.fields(RISHyperparams)}
        agent_changes = {k: v for k, v in changes.items() if k in agent_fields}
        top = {k: v for k, v in changes.items() if k not in agent_fields}
        agent = dataclasses.replace(self.agent, **agent_changes) if agent_changes else self.agent
        return dataclasses.replace(self, agent=agent, **top)


# --- text format -----------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, PriorMode):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(", ".join(_fmt(float(x)) for x in row) for row in value)
        return ", ".join(_fmt(x) for x in value)
    return str(value)


def _parse_floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _parse_rows(text: str) -> tuple:
    return tuple(_parse_floats(row) for row in text.split(";") if row.strip())


def _parse(section: str, key: str, raw: str, default):
    try:
        if key in ("walls", "hardest"):
            return _parse_rows(raw)
        if key == "bounds" or key == "value_clip":
            return _parse_floats(raw)
        if key.endswith("_hidden"):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if key == "prior_mode":
            return PriorMode(raw.strip())
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(float(raw)) if float(raw).is_integer() else _bad_int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ConfigurationError:
        raise
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r} ({exc})") from None


def _bad_int(raw):
    raise ValueError(f"expected an integer, got {raw!r}")


def parse_config(text: str) -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    allowed = {
        "maze": MAZE_KEYS,
        "agent": tuple(f.name for f in dataclasses.fields(RISHyperparams)),
        "run": RUN_KEYS,
    }
    unknown_sections = [s for s in cp.sections() if s not in allowed]
    if unknown_sections:
        raise ConfigurationError(f"unknown section(s): {unknown_sections}")
    top_defaults = TrainConfig.__dataclass_fields__
    agent_defaults = RISHyperparams()
    top, agent = {}, {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key not in allowed[section]:
                raise ConfigurationError(f"[{section}] unknown key {key!r}")
            if section == "agent":
                agent[key] = _parse(section, key, raw, getattr(agent_defaults, key))
            else:
                f = top_defaults[key]
                default = f.default if f.default is not dataclasses.MISSING else ()
                top[key] = _parse(section, key, raw, default)
    try:
        return TrainConfig(agent=RISHyperparams(**agent), **top)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    lines = ["[maze]"]
    for key in MAZE_KEYS:
        value = getattr(cfg, key)
        if value == () and key in ("bounds", "walls", "hardest"):
            continue
        lines.append(f"{key} = {_fmt(value)}")
    lines += ["", "[agent]"]
    for f in dataclasses.fields(RISHyperparams):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.agent, f.name))}")
    lines += ["", "[run]"]
    for key in RUN_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"
