"""Long experiment drivers and their checks.

Three studies take hours on a desk machine, so they are run once with
``aet experiment <name>`` and their artifacts are stored under a results
directory. The ``check_*`` functions re-read those artifacts (re-playing
saved snapshots where the claim is about playing strength) and return
``{"ok": bool, "detail": str, ...}``.

* ``learning``: mouse training against a frozen scripted cat.
* ``balance``: adaptive allocation plus randomization against a fixed 1:1
  control, compared on the final windowed win-rate gap.
* ``hist``: historical-opponent ratio arms rated in one round-robin.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bots import make_bot
from .config import ExperimentConfig, load_config, preset
from .league import evaluate_winrates
from .nn import snapshot
from .orchestrator import run_aet
from .rollout import NetPolicy

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
BALANCE_ITERATIONS = 350
HIST_ITERATIONS = 300
LEARN_WALL_CLOCK = 1800.0
LEARN_EVAL_GAMES = 200
EVAL_SEED = 12345


def _prune(run_dir: Path):
    # pool snapshots are only needed during training
    shutil.rmtree(run_dir / "pool", ignore_errors=True)


def _summary(run_dir: Path) -> dict:
    return json.loads((run_dir / "summary.json").read_text())


def _last_metrics(run_dir: Path) -> dict:
    last = None
    with open(run_dir / "metrics.jsonl") as fh:
        for line in fh:
            last = line
    return json.loads(last)


# ------------------------------------------------------------------ learning


def learning_config(seed: int, wall_clock: float = LEARN_WALL_CLOCK) -> ExperimentConfig:
    return replace(preset("learn"), seed=seed, wall_clock=wall_clock)


def evaluate_learning(run_dir: Path, n_games: int = LEARN_EVAL_GAMES) -> dict:
    cfg = load_config(run_dir / "config.json")
    cat = make_bot(cfg.train.frozen_cat, "cat", cfg.train.frozen_noise)
    mouse = NetPolicy(snapshot.load(run_dir / "checkpoints" / "mouse.snap"), "stochastic")
    _, trained = evaluate_winrates(cfg.arena, cat, mouse, n_games, EVAL_SEED)
    _, baseline = evaluate_winrates(cfg.arena, cat, make_bot("random", "mouse"), n_games,
                                    EVAL_SEED)
    return {"w_mouse": trained, "w_mouse_random_policy": baseline, "n_games": n_games}


def run_learning(root: Path, seeds=SEEDS, wall_clock: float = LEARN_WALL_CLOCK):
    for seed in seeds:
        out = Path(root) / "learning" / f"seed{seed}"
        run_aet(learning_config(seed, wall_clock), out)
        _prune(out)
        ev = evaluate_learning(out)
        (out / "eval.json").write_text(json.dumps(ev, indent=1, sort_keys=True))
        log.info("learning seed %d: %s", seed, ev)


def check_learning(root: Path, n_games: int = LEARN_EVAL_GAMES) -> dict:
    base = Path(root) / "learning"
    runs = sorted(base.glob("seed*")) if base.exists() else []
    if len(runs) < 3:
        return {"ok": False, "detail": f"need 3 seed runs under {base}, found {len(runs)}"}
    evals, elapsed = [], []
    for run in runs:
        cfg = load_config(run / "config.json")
        if cfg.workers < 4 or cfg.train.frozen_cat is None:
            return {"ok": False, "detail": f"{run.name}: needs >=4 workers and a frozen cat"}
        elapsed.append(_summary(run)["elapsed_s"])
        evals.append(evaluate_learning(run, n_games))
    trained = float(np.mean([e["w_mouse"] for e in evals]))
    baseline = float(np.mean([e["w_mouse_random_policy"] for e in evals]))
    # the loop checks the clock between ticks, so allow one tick of overrun
    within_budget = max(elapsed) <= LEARN_WALL_CLOCK + 60
    ok = trained > 0.6 and baseline < 0.05 and within_budget
    detail = (f"mouse win rate {baseline:.3f} (random policy) -> {trained:.3f} (trained), "
              f"per seed {[round(e['w_mouse'], 3) for e in evals]}, "
              f"longest run {max(elapsed):.0f}s")
    return {"ok": ok, "detail": detail, "evals": evals}


# ------------------------------------------------------------------ balance


def balance_base(iterations: int = BALANCE_ITERATIONS) -> ExperimentConfig:
    return replace(preset("coplay"), iterations=iterations)


def run_balance(root: Path, seeds=SEEDS, iterations: int = BALANCE_ITERATIONS):
    from .cli import ablation_arms

    arms = ablation_arms("balance", balance_base(iterations))
    for arm, cfg in arms.items():
        for seed in seeds:
            out = Path(root) / "balance" / arm.replace(":", "_").replace("+", "_") / f"seed{seed}"
            run_aet(replace(cfg, seed=seed), out, log_every=10)
            _prune(out)


def _gap(run_dir: Path) -> float:
    m = _last_metrics(run_dir)
    return abs(m["w_cat"] - m["w_mouse"])


def check_balance(root: Path) -> dict:
    base = Path(root) / "balance"
    treat, ctrl = base / "ada_er", base / "fixed_off"
    seeds = sorted(p.name for p in treat.glob("seed*")) if treat.exists() else []
    if len(seeds) < 3 or not all((ctrl / s / "metrics.jsonl").exists() for s in seeds):
        return {"ok": False, "detail": f"need 3 paired seed runs under {base}"}
    g_t = [_gap(treat / s) for s in seeds]
    g_c = [_gap(ctrl / s) for s in seeds]
    elapsed = sum(_summary(d / s)["elapsed_s"] for d in (treat, ctrl) for s in seeds)
    small = sum(g < 0.3 for g in g_t)
    ordered = sum(c >= t for t, c in zip(g_t, g_c))
    ok = small >= 2 and ordered >= 2 and elapsed <= 7200
    detail = (f"final gap ADA+ER {[round(g, 3) for g in g_t]} (<0.3 in {small}/3), "
              f"fixed 1:1 ER off {[round(g, 3) for g in g_c]} (>= treatment in {ordered}/3), "
              f"total {elapsed / 60:.0f} min")
    return {"ok": ok, "detail": detail, "gap_treatment": g_t, "gap_control": g_c}


# ------------------------------------------------------------------ historical ratio


def hist_base(iterations: int = HIST_ITERATIONS) -> ExperimentConfig:
    return replace(preset("coplay"), iterations=iterations)


def run_hist(root: Path, seeds=SEEDS, iterations: int = HIST_ITERATIONS, n_games: int = 20):
    from .cli import run_ablation

    out = Path(root) / "hist"
    t0 = time.monotonic()
    run_ablation("hist", hist_base(iterations), seeds, out, n_games)
    (out / "timing.json").write_text(json.dumps({"total_s": round(time.monotonic() - t0, 1)}))
    for d in out.glob("*/seed*"):
        _prune(d)


def check_hist(root: Path) -> dict:
    out = Path(root) / "hist"
    if not (out / "trueskill.csv").exists():
        return {"ok": False, "detail": f"no round-robin table under {out}"}
    with open(out / "trueskill.csv") as fh:
        rows = list(csv.DictReader(fh))
    mu: dict = {}
    for r in rows:
        if r["arm"] != "anchor":
            mu.setdefault(r["seed"], {}).setdefault(r["arm"], []).append(float(r["mu"]))
    elapsed = json.loads((out / "timing.json").read_text())["total_s"]
    wins, per_seed = 0, {}
    for seed, arms in sorted(mu.items()):
        m = {a: float(np.mean(v)) for a, v in arms.items()}
        per_seed[seed] = {a: round(v, 2) for a, v in sorted(m.items())}
        if all(m["0.2"] >= m[a] - 1.0 for a in m if a != "0.2"):
            wins += 1
    ok = len(mu) >= 3 and wins >= 2 and elapsed <= 3 * 3600
    detail = (f"0.2 arm within 1.0 mu of the best in {wins}/{len(mu)} seeds {per_seed}, "
              f"training and rating {elapsed / 60:.0f} min")
    return {"ok": ok, "detail": detail, "mu": per_seed}


STUDIES = {"learning": run_learning, "balance": run_balance, "hist": run_hist}
CHECKS = {"learning": check_learning, "balance": check_balance, "hist": check_hist}
