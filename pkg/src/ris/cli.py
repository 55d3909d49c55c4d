"""Command-line entry points: ``ris train``, ``ris eval`` and ``ris report``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import TrainConfig, load_config
from .core import PriorMode
from .env import make_maze
from .errors import ConfigurationError, RISError, UsageError

log = logging.getLogger("ris")

EVAL_HEADER = ("checkpoint", "maze", "episodes", "success_rate", "mean_return")
REPORT_HEADER = ("run", "final_env_steps", "final_eval_success", "best_eval_success", "final_subgoal_error")


def _config_from_args(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.prior_mode is not None:
        changes["prior_mode"] = PriorMode(args.prior_mode)
    if args.maze is not None:
        changes["maze"] = args.maze
        # explicit maze kind replaces any custom layout in the file
        changes.update(bounds=(), walls=(), hardest=())
    if args.steps is not None:
        changes["total_env_steps"] = args.steps
    if args.out is not None:
        changes["out_dir"] = args.out
    cfg = cfg.with_overrides(**changes) if changes else cfg
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .training import train

    cfg = _config_from_args(args)
    out = Path(cfg.out_dir)
    log.info("training %s maze, prior %s, seed %d -> %s", cfg.maze, cfg.prior_mode.value, cfg.seed, out)
    result = train(cfg, out_dir=out)
    last = result.metrics[-1]
    print(f"final eval_success {last['eval_success']:.3f} at {int(last['env_steps'])} env steps; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .training import eval_generator, evaluate, load_agent

    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    spec = make_maze(args.maze)
    agent = load_agent(args.checkpoint, spec)
    rng = eval_generator(args.seed)
    ev = evaluate(agent, spec, args.episodes, rng, hardest=args.hardest)
    row = [str(args.checkpoint), args.maze, str(args.episodes), repr(ev.success_rate), repr(ev.mean_return)]
    print(f"success_rate {ev.success_rate:.3f} mean_return {ev.mean_return:.2f} over {args.episodes} episodes")
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fresh:
                w.writerow(EVAL_HEADER)
            w.writerow(row)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        w.writerow(row)
    return 0


def _run_label(path: Path) -> str:
    return path.parent.name if path.name == "metrics.csv" else path.stem


def _plot(runs: dict, column: str, ylabel: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed hash salt keeps the SVG byte-stable between invocations
    matplotlib.rcParams["svg.hashsalt"] = "ris"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in runs.items():
        ax.plot([r["env_steps"] for r in rows], [r[column] for r in rows], marker=".", label=label)
    ax.set_xlabel("env steps")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(args) -> int:
    from .training import read_metrics

    runs = {}
    for raw in args.metrics:
        path = Path(raw)
        try:
            rows = read_metrics(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        label = _run_label(path)
        while label in runs:
            label += "'"
        runs[label] = rows
    if not runs:
        log.error("no readable metrics files")
        return 1

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for label, rows in runs.items():
        last = rows[-1]
        table.append([label, str(int(last["env_steps"])), f"{last['eval_success']:.3f}",
                      f"{max(r['eval_success'] for r in rows):.3f}", f"{last['subgoal_error']:.3f}"])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(table)
    widths = [max(len(h), *(len(r[i]) for r in table)) for i, h in enumerate(REPORT_HEADER)]
    print("  ".join(h.ljust(n) for h, n in zip(REPORT_HEADER, widths)))
    for r in table:
        print("  ".join(c.ljust(n) for c, n in zip(r, widths)))

    _plot(runs, "eval_success", "eval success rate", out / "eval_success.svg")
    _plot(runs, "subgoal_error", "subgoal error (units)", out / "subgoal_error.svg")
    print(f"wrote {out / 'summary.csv'}, {out / 'eval_success.svg'}, {out / 'subgoal_error.svg'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ris", description="Goal-conditioned RL with imagined subgoals on point-mass mazes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent and write metrics and checkpoints")
    t.add_argument("--config", help="INI config file (defaults used when omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--prior-mode", choices=[m.value for m in PriorMode])
    t.add_argument("--maze", choices=["u", "s"])
    t.add_argument("--steps", type=int, help="override total_env_steps")
    t.add_argument("--out", help="output directory (created if missing)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with the deterministic policy")
    e.add_argument("checkpoint")
    e.add_argument("--maze", choices=["u", "s"], default="u")
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--hardest", action=argparse.BooleanOptionalAction, default=True,
                   help="pin start and goal to the hardest configuration (default on)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="append the result row to this CSV file")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarise metrics.csv files and plot learning curves")
    r.add_argument("metrics", nargs="+")
    r.add_argument("--out", help="directory for summary.csv and SVG charts")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RISError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
