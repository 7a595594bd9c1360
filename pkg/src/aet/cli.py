"""Command-line entry points: train, ablate, eval and replay.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Environment overrides: ``AET_OUT_DIR`` and ``AET_WORKERS`` apply when the
corresponding flag is absent.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import arena as A
from .bots import ScriptedPolicy, make_bot
from .config import (ABLATIONS, PRESETS, ConfigError, ExperimentConfig, apply_overrides,
                     config_diff, load_config, preset)
from .league import TrueSkillEnv, other, rate_games
from .nn import snapshot
from .orchestrator import run_aet
from .rollout import Job, NetPolicy, play_match, run_episodes

log = logging.getLogger("aet")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "smoke")
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    workers = args.workers if args.workers is not None else os.environ.get("AET_WORKERS")
    if workers is not None:
        kw["workers"] = int(workers)
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    return cfg.with_overrides(**kw) if kw else cfg.validate()


def _out_dir(args, default: str) -> Path:
    return Path(args.out_dir or os.environ.get("AET_OUT_DIR") or default)


def load_policy(spec: str, mode: str = "stochastic"):
    """``side:botname[:noise]`` for a scripted bot, otherwise a snapshot path."""
    head = spec.split(":")
    if head[0] in ("cat", "mouse") and len(head) >= 2 and not Path(spec).exists():
        noise = float(head[2]) if len(head) > 2 else 0.0
        return make_bot(head[1], head[0], noise)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return NetPolicy(snapshot.load(path), mode, tag=path.stem)


def _side(policy) -> str:
    return policy.side


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config_hash": cfg.config_hash(), "code_version": __version__,
           "seed": cfg.seed, "workers": cfg.workers, "iterations": cfg.iterations,
           "name": cfg.name}
    doc.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


# ------------------------------------------------------------------ eval


def evaluate(cat, mouse, config: A.ArenaConfig, n_games: int, seed: int,
             record_dir: Path | None = None) -> dict:
    """Seeded games with randomization off. Reward totals are split by category."""
    if _side(cat) != "cat" or _side(mouse) != "mouse":
        raise UsageError(f"need one cat and one mouse, got {_side(cat)} and {_side(mouse)}")
    if record_dir is not None:
        record_dir.mkdir(parents=True, exist_ok=True)
        seeds = [int(s) for s in np.random.default_rng([seed, 5]).integers(0, 2**31 - 1, n_games)]
        jobs = [Job(s, cat, mouse, log_path=str(record_dir / f"game{i:04d}.jsonl"))
                for i, s in enumerate(seeds)]
        results = run_episodes(config, jobs) if jobs else []
    else:
        results = play_match(config, cat, mouse, n_games, seed)
    results = [r for r in results if r.error is None]
    n = len(results)
    report = {"n_games": n, "seed": seed, "w_cat": None, "w_mouse": None,
              "mean_length": None, "rewards": {}}
    if n == 0:
        return report
    wc = sum(r.cat_won for r in results) / n
    report.update(w_cat=wc, w_mouse=1.0 - wc,
                  mean_length=float(np.mean([r.steps for r in results])))
    for side, agents in (("cat", [A.CAT]), ("mouse", list(A.MICE))):
        cats: dict[str, float] = {}
        total = 0.0
        for r in results:
            for a in agents:
                for k, v in r.by_kind[a].items():
                    cats[k] = cats.get(k, 0.0) + v
                total += float(r.returns[a])
        norm = n * len(agents)
        report["rewards"][side] = {"per_agent_return": total / norm,
                                   "by_category": {k: v / norm for k, v in sorted(cats.items())}}
    return report


def cmd_eval(args) -> int:
    a = load_policy(args.a, args.mode)
    b = load_policy(args.b, args.mode)
    if _side(a) == _side(b):
        raise UsageError(f"both policies play the {_side(a)} side")
    cat, mouse = (a, b) if _side(a) == "cat" else (b, a)
    if args.config:
        config = load_config(args.config).arena
    elif isinstance(cat, NetPolicy) or isinstance(mouse, NetPolicy):
        config = _arena_for(cat, mouse, args.preset)
    else:
        config = preset(args.preset or "smoke").arena
    rec = Path(args.record_dir) if args.record_dir else None
    report = evaluate(cat, mouse, config, args.n_games, args.seed or 0, rec)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def _arena_for(cat, mouse, preset_name):
    """Arena matching the snapshots' arena hash among the presets."""
    want = next(p.params.arena_hash for p in (cat, mouse) if isinstance(p, NetPolicy))
    names = [preset_name] if preset_name else list(PRESETS)
    for name in names:
        cfg = preset(name).arena
        if cfg.shape_key() == want:
            return cfg
    raise UsageError("snapshot arena does not match any preset; pass --config")


# ------------------------------------------------------------------ replay


def cmd_replay(args) -> int:
    path = Path(args.log)
    if not path.exists():
        print(f"error: no such replay log: {path}", file=sys.stderr)
        return 2
    ok, bad, states = A.verify_replay(path)
    if not args.quiet:
        for s in states[:: max(1, args.every)]:
            print(f"-- step {s.step_count}")
            print(A.render(s))
    if ok:
        print(f"verified: {len(states) - 1} steps")
        return 0
    print(f"diverged at step {bad}")
    return 1


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, f"runs/{cfg.name}-s{cfg.seed}")
    write_manifest(out, cfg, "train", {"status": "running"})
    summary = run_aet(cfg, out)
    write_manifest(out, cfg, "train", {"status": "done", "episodes": summary.episodes,
                                       "env_steps": summary.env_steps,
                                       "stopped_by": summary.stopped_by})
    print(json.dumps({"out_dir": str(out), "episodes": summary.episodes,
                      "updates": summary.updates, "final_ratio": summary.final_ratio}))
    return 0


# ------------------------------------------------------------------ ablate


def ablation_arms(name: str, base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    if name not in ABLATIONS:
        raise UsageError(f"unknown ablation preset {name!r}; choose from {sorted(ABLATIONS)}")
    return {arm: replace(apply_overrides(base, ov), name=f"{name}-{arm}")
            for arm, ov in ABLATIONS[name].items()}


ANCHOR_CAT = "anchor:cat"
ANCHOR_MOUSE = "anchor:mouse"


def round_robin(config: A.ArenaConfig, cats: dict, mice: dict, n_games: int, seed: int,
                env: TrueSkillEnv | None = None):
    """Every cat plays every mouse ``n_games`` times. Ratings share one scale,
    shifted so the scripted anchor pair averages the default mean."""
    env = env or TrueSkillEnv()
    games, table = [], {}
    for i, (cid, cat) in enumerate(sorted(cats.items())):
        for j, (mid, mouse) in enumerate(sorted(mice.items())):
            res = play_match(config, cat, mouse, n_games, seed * 7919 + i * 131 + j)
            wins = 0
            for r in res:
                if r.error is not None:
                    continue
                wins += int(r.cat_won)
                games.append((cid, mid) if r.cat_won else (mid, cid))
            table[(cid, mid)] = wins / max(1, len(res))
    ratings = rate_games(list(cats) + list(mice), games, env)
    if ANCHOR_CAT in ratings and ANCHOR_MOUSE in ratings:
        shift = env.mu - 0.5 * (ratings[ANCHOR_CAT].mu + ratings[ANCHOR_MOUSE].mu)
        ratings = {k: replace(r, mu=r.mu + shift) for k, r in ratings.items()}
    return ratings, table


def run_ablation(name: str, base: ExperimentConfig, seeds, out: Path, n_games: int = 10,
                 arms=None) -> dict:
    all_arms = ablation_arms(name, base)
    if arms:
        missing = set(arms) - set(all_arms)
        if missing:
            raise UsageError(f"unknown arm(s) {sorted(missing)} for {name}")
        all_arms = {k: v for k, v in all_arms.items() if k in arms}
    out.mkdir(parents=True, exist_ok=True)
    ref = next(iter(all_arms.values()))
    diffs = {arm: {k: list(v) for k, v in config_diff(ref, cfg).items() if k != "name"}
             for arm, cfg in all_arms.items()}
    cats = {ANCHOR_CAT: make_bot("heuristic", "cat")}
    mice = {ANCHOR_MOUSE: make_bot("heuristic", "mouse")}
    runs = {}
    for arm, cfg in all_arms.items():
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed))
            run_dir = out / f"{arm}" / f"seed{seed}"
            write_manifest(run_dir, run_cfg, f"ablate {name}", {"arm": arm})
            summary = run_aet(run_cfg, run_dir, log_every=0)
            runs[(arm, seed)] = run_dir
            for side, path in summary.checkpoints.items():
                pol = NetPolicy(snapshot.load(path), "stochastic", tag=f"{arm}/s{seed}")
                (cats if side == "cat" else mice)[f"{arm}|{seed}|{side}"] = pol
            if "cat" not in summary.checkpoints and run_cfg.train.frozen_cat:
                cats[f"{arm}|{seed}|cat"] = make_bot(run_cfg.train.frozen_cat, "cat",
                                                     run_cfg.train.frozen_noise)
    ratings, table = round_robin(base.arena, cats, mice, n_games, base.seed)
    rows = []
    for key, r in sorted(ratings.items()):
        if key.startswith("anchor:"):
            arm, seed, side = "anchor", "", key.split(":")[1]
        else:
            arm, seed, side = key.split("|")
        rows.append({"arm": arm, "seed": seed, "side": side, "model": key,
                     "mu": round(r.mu, 6), "sigma": round(r.sigma, 6), "games": r.games})
    with open(out / "trueskill.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["arm", "seed", "side", "model", "mu", "sigma", "games"])
        w.writeheader()
        w.writerows(rows)
    per_arm = {}
    for arm in all_arms:
        for seed in seeds:
            mus = [r["mu"] for r in rows if r["arm"] == arm and r["seed"] == str(seed)]
            per_arm.setdefault(arm, {})[str(seed)] = float(np.mean(mus)) if mus else None
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm"] + [f"seed{s}" for s in seeds] + ["mean_mu"])
        for arm, by_seed in per_arm.items():
            vals = [v for v in by_seed.values() if v is not None]
            w.writerow([arm] + [by_seed[str(s)] for s in seeds] + [float(np.mean(vals))])
    report = {"preset": name, "seeds": list(seeds), "arms": list(all_arms), "config_diff": diffs,
              "mu": per_arm, "n_games": n_games}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def cmd_ablate(args) -> int:
    if not args.preset:
        raise UsageError("ablate needs --preset")
    base = preset(args.base) if not args.config else load_config(args.config)
    kw = {}
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    workers = args.workers if args.workers is not None else os.environ.get("AET_WORKERS")
    if workers is not None:
        kw["workers"] = int(workers)
    if args.seed is not None:
        kw["seed"] = args.seed
    base = base.with_overrides(**kw) if kw else base
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    out = _out_dir(args, f"runs/ablate-{args.preset}")
    report = run_ablation(args.preset, base, seeds, out, args.n_games or 10, args.arm)
    print(json.dumps(report["mu"], indent=1, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    from . import experiments as X

    root = Path(args.results)
    if not args.check:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(X.SEEDS)
        X.STUDIES[args.study](root, seeds=seeds)
    res = X.CHECKS[args.study](root)
    print(f"{args.study}: {'PASS' if res['ok'] else 'FAIL'} - {res['detail']}")
    return 0 if res["ok"] else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aet", description="Asymmetric cat-and-mouse self-play trainer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--preset", help=f"named preset ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--out-dir")

    t = sub.add_parser("train", help="run one experiment")
    common(t)
    t.set_defaults(func=cmd_train)

    ab = sub.add_parser("ablate", help="run an ablation preset and rate the arms")
    ab.add_argument("--config")
    ab.add_argument("--preset", help=f"ablation ({', '.join(sorted(ABLATIONS))})")
    ab.add_argument("--base", default="smoke", help="base experiment preset")
    ab.add_argument("--arm", action="append", help="run only this arm (repeatable)")
    ab.add_argument("--seeds", help="comma-separated seed list (default 0,1,2)")
    ab.add_argument("--seed", type=int, help="evaluation seed")
    ab.add_argument("--workers", type=int)
    ab.add_argument("--iterations", type=int)
    ab.add_argument("--n-games", type=int, help="games per round-robin pair")
    ab.add_argument("--out-dir")
    ab.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="play two policies against each other")
    ev.add_argument("a", help="snapshot path or side:bot[:noise], e.g. cat:heuristic")
    ev.add_argument("b")
    ev.add_argument("--n-games", type=int, default=50)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--mode", choices=("stochastic", "argmax"), default="stochastic")
    ev.add_argument("--config")
    ev.add_argument("--preset")
    ev.add_argument("--record-dir", help="write one replay log per game here")
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("experiment", help="run or check a long study (learning, balance, hist)")
    ex.add_argument("study", choices=("learning", "balance", "hist"))
    ex.add_argument("--results", default="results", help="results root directory")
    ex.add_argument("--check", action="store_true", help="only check stored artifacts")
    ex.add_argument("--seeds", help="comma-separated seed list (default 0,1,2)")
    ex.set_defaults(func=cmd_experiment)

    rp = sub.add_parser("replay", help="verify and print a replay log")
    rp.add_argument("log")
    rp.add_argument("--quiet", action="store_true", help="only print the verdict")
    rp.add_argument("--every", type=int, default=1, help="print every k-th frame")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 2
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
