"""Experiment configuration: one JSON document fully determines a run given its seed."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import arena as A
from .nn.model import NetConfig
from .ppo import PPOConfig


class ConfigError(ValueError):
    """Raised with a field-qualified message, e.g. ``ada.alpha: must be > beta``."""


@dataclass(frozen=True)
class ADAConfig:
    enabled: bool = True
    alpha: float = 0.8
    beta: float = 0.5
    initial_ratio: float = 0.5
    fixed_ratio: float | None = None  # used when disabled
    interval: int = 20  # orchestrator iterations between ratio updates
    window: int = 200  # completed episodes in the win-rate window


@dataclass(frozen=True)
class ERConfig:
    enabled: bool = True
    gap_on: float = 0.3
    gap_off: float = 0.1
    persistence: int = 2
    probs: tuple = (0.45, 0.35, 0.15, 0.05)  # levelup, hard_case, timed_buff, none
    buff_window: int = 40
    tier: int = 1


@dataclass(frozen=True)
class LeagueConfig:
    capacity: int = 32
    admit_every: int = 50  # trainer updates between pool admissions
    admit_games: int = 8
    hist_ratio: float = 0.2
    pfsp_p: float = 1.0
    per_worker_hmp: bool = False


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    chunk: int = 512
    lr: float = 5e-5
    max_grad_norm: float | None = None
    buffer_capacity: int = 16384  # transitions per side
    max_updates_per_iteration: int = 4
    decay_horizon: int = 2_000_000  # env steps over which guidance rewards anneal
    checkpoint_every: int = 50
    frozen_cat: str | None = None  # scripted bot name; the cat side is then not trained
    frozen_noise: float = 0.0
    sample_mode: str = "stochastic"
    lockstep: int = 8  # episodes advanced together in one process


@dataclass(frozen=True)
class ExperimentConfig:
    arena: A.ArenaConfig = field(default_factory=A.ArenaConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ada: ADAConfig = field(default_factory=ADAConfig)
    er: ERConfig = field(default_factory=ERConfig)
    league: LeagueConfig = field(default_factory=LeagueConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    workers: int = 4
    processes: int = 0  # 0 = min(workers, cpu count); 1 = in-process
    seed: int = 0
    iterations: int = 200
    wall_clock: float | None = None  # seconds; stops early when set
    name: str = "run"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arena"] = self.arena.to_dict()
        d["net"] = self.net.to_dict()
        d["er"]["probs"] = list(self.er.probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"{sorted(extra)[0]}: unknown field")
        kw = {}
        sub = {"arena": A.ArenaConfig, "ppo": PPOConfig, "ada": ADAConfig, "er": ERConfig,
               "league": LeagueConfig, "train": TrainConfig}
        for name, value in d.items():
            if name in sub:
                kw[name] = _build(sub[name], value, name)
            elif name == "net":
                try:
                    kw[name] = NetConfig.from_dict({**NetConfig().to_dict(), **value})
                except TypeError as exc:
                    raise ConfigError(f"net: {exc}") from None
            else:
                kw[name] = value
        if "er" in kw:
            kw["er"] = replace(kw["er"], probs=tuple(kw["er"].probs))
        return cls(**kw).validate()

    def validate(self) -> "ExperimentConfig":
        def bad(path, msg):
            raise ConfigError(f"{path}: {msg}")

        try:
            self.arena.validate()
        except A.ArenaConfigError as exc:
            bad("arena", str(exc))
        try:
            self.ppo.validate()
        except ValueError as exc:
            bad("ppo", str(exc))
        a = self.ada
        if not 0 <= a.beta < a.alpha <= 1:
            bad("ada.alpha", "need 0 <= beta < alpha <= 1")
        if not a.beta <= a.initial_ratio <= a.alpha:
            bad("ada.initial_ratio", "must lie in [beta, alpha]")
        if a.fixed_ratio is not None and not 0 < a.fixed_ratio < 1:
            bad("ada.fixed_ratio", "must lie in (0, 1)")
        if a.interval < 1:
            bad("ada.interval", "must be >= 1")
        if a.window < 1:
            bad("ada.window", "must be >= 1")
        e = self.er
        if len(e.probs) != 4 or any(p < 0 for p in e.probs) or abs(sum(e.probs) - 1) > 1e-9:
            bad("er.probs", "need four non-negative probabilities summing to 1")
        if not 0 <= e.gap_off <= e.gap_on <= 1:
            bad("er.gap_on", "need 0 <= gap_off <= gap_on <= 1")
        if e.persistence < 1:
            bad("er.persistence", "must be >= 1")
        lg = self.league
        if lg.capacity < 1:
            bad("league.capacity", "must be >= 1")
        if not 0 <= lg.hist_ratio <= 1:
            bad("league.hist_ratio", "must lie in [0, 1]")
        if lg.admit_every < 1:
            bad("league.admit_every", "must be >= 1")
        if lg.admit_games < 0:
            bad("league.admit_games", "must be >= 0")
        t = self.train
        if t.batch_size < 1:
            bad("train.batch_size", "must be >= 1")
        if t.buffer_capacity < t.batch_size:
            bad("train.buffer_capacity", "must hold at least one batch")
        if t.lr <= 0:
            bad("train.lr", "must be > 0")
        if t.sample_mode not in ("stochastic", "argmax"):
            bad("train.sample_mode", "must be 'stochastic' or 'argmax'")
        if t.frozen_cat is not None and t.frozen_cat not in ("heuristic", "random", "idle"):
            bad("train.frozen_cat", "unknown scripted bot")
        if self.workers < 2 and t.frozen_cat is None:
            bad("workers", "need at least 2 (one per side)")
        if self.workers < 1:
            bad("workers", "must be >= 1")
        if self.iterations < 0:
            bad("iterations", "must be >= 0")
        return self

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw).validate()


def _build(cls, value: dict, path: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in fields(cls)}
    for k in value:
        if k not in names:
            raise ConfigError(f"{path}.{k}: unknown field")
    try:
        return cls(**value)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path


# ------------------------------------------------------------------ presets

SMOKE_ARENA = A.ArenaConfig(width=10, height=8, n_cheese=2, n_rockets=2, max_steps=150,
                            vision_radius=4)

LEARN_ARENA = A.ArenaConfig(width=7, height=5, n_cheese=1, max_steps=80, vision_radius=4,
                            wall_density=0.05, push_progress_per_step=25, crack_hp=40)


def preset(name: str) -> ExperimentConfig:
    if name == "desk":
        return ExperimentConfig(train=TrainConfig(lr=3e-4, max_grad_norm=1.0), name="desk")
    if name == "smoke":
        return ExperimentConfig(
            arena=SMOKE_ARENA,
            net=NetConfig(pool_grid=(2, 2)),
            ppo=PPOConfig(traj_len=64),
            ada=ADAConfig(interval=10, window=50),
            league=LeagueConfig(admit_every=25, admit_games=2),
            train=TrainConfig(batch_size=512, chunk=512, lr=3e-4, max_grad_norm=1.0,
                              buffer_capacity=2048, max_updates_per_iteration=1,
                              decay_horizon=200_000, checkpoint_every=50),
            workers=2, processes=1, iterations=200, name="smoke")
    if name == "tiny":
        return replace(preset("smoke"), iterations=6, name="tiny",
                       train=replace(preset("smoke").train, batch_size=128, buffer_capacity=1024,
                                     checkpoint_every=3),
                       league=LeagueConfig(admit_every=2, admit_games=1, capacity=3),
                       ada=ADAConfig(interval=2, window=10))
    if name == "learn":
        # mouse-only training against a frozen scripted cat on a short task chain
        base = preset("smoke")
        return replace(base, arena=LEARN_ARENA, name="learn", workers=8, iterations=100_000,
                       wall_clock=1800.0,
                       net=NetConfig(conv_channels=8, res_blocks=1, pool_grid=(2, 2)),
                       train=replace(base.train, frozen_cat="random", lr=1e-3, max_grad_norm=10.0,
                                     batch_size=1024, buffer_capacity=4096,
                                     max_updates_per_iteration=3, decay_horizon=400_000,
                                     lockstep=8, checkpoint_every=20),
                       ada=ADAConfig(enabled=False, fixed_ratio=0.5, window=100, interval=10),
                       er=ERConfig(enabled=False))
    if name == "coplay":
        # both sides trained from scratch on the learn arena
        base = preset("learn")
        return replace(base, name="coplay", iterations=150, wall_clock=None,
                       train=replace(base.train, frozen_cat=None),
                       ada=ADAConfig(interval=5, window=100),
                       er=ERConfig(),
                       league=LeagueConfig(admit_every=20, admit_games=2, capacity=16))
    raise ConfigError(f"preset: unknown preset {name!r}")


PRESETS = ("desk", "smoke", "tiny", "learn", "coplay")

# Ablation presets: each arm is a list of (dotted field, value) overrides on a base config.
ABLATIONS = {
    "ada": {"1:1": [("ada.enabled", False), ("ada.fixed_ratio", 0.5)],
            "1:4": [("ada.enabled", False), ("ada.fixed_ratio", 0.8)],
            "ada": [("ada.enabled", True)]},
    "er": {"on": [("er.enabled", True)], "off": [("er.enabled", False)]},
    "hist": {"0": [("league.hist_ratio", 0.0)], "0.2": [("league.hist_ratio", 0.2)],
             "0.5": [("league.hist_ratio", 0.5)]},
    "memory": {"on": [("net.use_memory", True)], "off": [("net.use_memory", False)]},
    "invisible": {"on": [("net.use_invisible", True)], "off": [("net.use_invisible", False)]},
    "gamma": {"0.9": [("ppo.gamma", 0.9)], "0.97": [("ppo.gamma", 0.97)],
              "0.99": [("ppo.gamma", 0.99)]},
    "balance": {"ada+er": [("ada.enabled", True), ("er.enabled", True)],
                "fixed+off": [("ada.enabled", False), ("ada.fixed_ratio", 0.5),
                              ("er.enabled", False)]},
}


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    d = cfg.to_dict()
    for path, value in overrides:
        node = d
        parts = path.split(".")
        for p in parts[:-1]:
            if p not in node:
                raise ConfigError(f"{path}: unknown field")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{path}: unknown field")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> dict:
    """Dotted paths whose values differ between two configs."""
    out = {}

    def walk(x, y, prefix):
        if isinstance(x, dict) and isinstance(y, dict):
            for k in sorted(set(x) | set(y)):
                walk(x.get(k), y.get(k), f"{prefix}{k}.")
        elif x != y:
            out[prefix[:-1]] = (x, y)

    walk(a.to_dict(), b.to_dict(), "")
    return out
