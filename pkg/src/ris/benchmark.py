"""Multi-seed comparison of prior modes on one maze.

Runs the training loop for every (prior mode, seed) pair, then summarises
each mode by its seed-averaged eval-success curve.

    python -m ris.benchmark --config configs/u_maze_desk.ini --out runs/bench
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config
from .core import PriorMode
from .training import train

log = logging.getLogger(__name__)

DEFAULT_MODES = ("ris", "uniform", "oracle")
DEFAULT_SEEDS = (0, 1, 2, 3)


@dataclass
class ModeSummary:
    mode: str
    env_steps: list
    mean_success: list
    # first eval step where the seed-mean success reaches the threshold (None if never)
    steps_to_threshold: int
    final_success: float
    best_success: float
    seconds_per_seed: float


def run_protocol(base: TrainConfig, seeds=DEFAULT_SEEDS, modes=DEFAULT_MODES, out_dir=None) -> dict:
    """Train every (mode, seed); returns {mode: [(metrics rows, wall seconds), ...]}."""
    results = {}
    for mode in modes:
        runs = []
        for seed in seeds:
            cfg = base.with_overrides(seed=int(seed), prior_mode=PriorMode(mode))
            target = Path(out_dir) / f"{mode}_s{seed}" if out_dir else None
            t0 = time.time()
            res = train(cfg, out_dir=target)
            runs.append((res.metrics, time.time() - t0))
            log.info("%s seed %d: final eval_success %.2f (%.0fs)", mode, seed,
                     res.metrics[-1]["eval_success"], runs[-1][1])
        results[mode] = runs
    return results


def summarize(results: dict, threshold: float = 0.8) -> dict:
    out = {}
    for mode, runs in results.items():
        steps = [int(r["env_steps"]) for r in runs[0][0]]
        curves = np.array([[r["eval_success"] for r in rows] for rows, _ in runs])
        mean = curves.mean(axis=0)
        hit = np.flatnonzero(mean >= threshold)
        out[mode] = ModeSummary(
            mode=mode, env_steps=steps, mean_success=mean.tolist(),
            steps_to_threshold=int(steps[hit[0]]) if hit.size else None,
            final_success=float(mean[-1]), best_success=float(mean.max()),
            seconds_per_seed=float(np.mean([t for _, t in runs])),
        )
    return out


def verdict(summary: dict, threshold: float = 0.8) -> tuple:
    """Check the three directional claims; returns (all_ok, per-claim dict)."""
    ris, uni, orc = summary["ris"], summary["uniform"], summary["oracle"]
    claims = {
        "ris_reaches_threshold": ris.steps_to_threshold is not None,
        "uniform_lower_than_ris": uni.final_success < ris.final_success,
        "oracle_no_slower_than_ris": (
            orc.steps_to_threshold is not None
            and (ris.steps_to_threshold is None or orc.steps_to_threshold <= ris.steps_to_threshold)
        ),
    }
    return all(claims.values()), claims


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m ris.benchmark", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="base config; defaults when omitted")
    p.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    p.add_argument("--modes", nargs="+", default=list(DEFAULT_MODES), choices=[m.value for m in PriorMode])
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = load_config(args.config) if args.config else TrainConfig()
    results = run_protocol(base, args.seeds, args.modes, args.out)
    summary = summarize(results, args.threshold)
    payload = {m: s.__dict__ for m, s in summary.items()}
    if {"ris", "uniform", "oracle"} <= set(summary):
        ok, claims = verdict(summary, args.threshold)
        payload["verdict"] = {"ok": ok, **claims}
    Path(args.out, "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
