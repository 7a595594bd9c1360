"""Historical model pools, pFSP opponent sampling, win-rate matrix, TrueSkill.

One :class:`League` owns both pools. Results live in a single cross table
``cat_wins[cat_id][mouse_id] / games``; a mouse model's win rate against a
cat model is the complement, since games have no draws.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr

from . import arena as A
from .nn import snapshot
from .nn.model import NetworkParams
from .rollout import NetPolicy, play_match

SIDES = ("cat", "mouse")


class LeagueError(ValueError):
    pass


def other(side: str) -> str:
    return "mouse" if side == "cat" else "cat"


# ------------------------------------------------------------------ pFSP


def pfsp_weights(d, p: float = 1.0) -> np.ndarray:
    """Opponent probabilities proportional to ``(1 - d_b) ** p``.

    ``d_b`` is the learner's win rate against opponent ``b``. When every
    weight is zero (the learner beats everyone) the result is uniform.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("pfsp_weights needs a non-empty 1-D win-rate vector")
    if np.any((d < 0) | (d > 1)) or not np.all(np.isfinite(d)):
        raise ValueError("win rates must lie in [0, 1]")
    w = (1.0 - d) ** p
    total = w.sum()
    if total <= 0:
        return np.full(d.size, 1.0 / d.size)
    return w / total


# ------------------------------------------------------------------ TrueSkill


@dataclass(frozen=True)
class TrueSkillEnv:
    mu: float = 25.0
    sigma: float = 25.0 / 3.0
    beta: float = 25.0 / 6.0
    tau: float = 25.0 / 300.0
    min_sigma: float = 1e-3


@dataclass(frozen=True)
class Rating:
    mu: float = 25.0
    sigma: float = 25.0 / 3.0
    games: int = 0

    def conservative(self, k: float = 3.0) -> float:
        return self.mu - k * self.sigma


DEFAULT_ENV = TrueSkillEnv()


def _v_w(t: float):
    """Truncated-Gaussian correction terms for a win, computed in log space."""
    log_pdf = -0.5 * t * t - 0.5 * math.log(2 * math.pi)
    v = math.exp(log_pdf - float(log_ndtr(t)))
    w = v * (v + t)
    return v, w


def trueskill_update(winner: Rating, loser: Rating, env: TrueSkillEnv = DEFAULT_ENV):
    """Closed-form two-player TrueSkill update for a decisive game."""
    sw2 = winner.sigma ** 2 + env.tau ** 2
    sl2 = loser.sigma ** 2 + env.tau ** 2
    c2 = 2 * env.beta ** 2 + sw2 + sl2
    c = math.sqrt(c2)
    v, w = _v_w((winner.mu - loser.mu) / c)
    mu_w = winner.mu + sw2 / c * v
    mu_l = loser.mu - sl2 / c * v
    sig_w = math.sqrt(max(sw2 * (1 - sw2 / c2 * w), env.min_sigma ** 2))
    sig_l = math.sqrt(max(sl2 * (1 - sl2 / c2 * w), env.min_sigma ** 2))
    return (Rating(mu_w, sig_w, winner.games + 1), Rating(mu_l, sig_l, loser.games + 1))


def rate_games(players, games, env: TrueSkillEnv = DEFAULT_ENV, anchor=None):
    """Sequentially rate ``games`` (pairs ``(winner, loser)``) among ``players``.

    With ``anchor`` given, all means are shifted so that the anchor's mean is
    ``env.mu``; this pins the scale for comparisons across tables.
    """
    ratings = {p: Rating(env.mu, env.sigma) for p in players}
    for wnr, lsr in games:
        ratings[wnr], ratings[lsr] = trueskill_update(ratings[wnr], ratings[lsr], env)
    if anchor is not None:
        shift = env.mu - ratings[anchor].mu
        ratings = {k: Rating(r.mu + shift, r.sigma, r.games) for k, r in ratings.items()}
    return ratings


# ------------------------------------------------------------------ pool


@dataclass
class PoolEntry:
    model_id: str
    side: str
    version: int
    step: int
    rating: Rating = field(default_factory=Rating)
    file: str = ""
    params: NetworkParams | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "side": self.side, "version": self.version,
                "step": self.step, "rating": asdict(self.rating), "file": self.file}


@dataclass
class MatchSpec:
    learner: str  # side being trained
    opponent_kind: str  # latest | hmp
    opponent_id: str | None
    intervention: A.ERIntervention = A.NO_INTERVENTION
    seed: int = 0

    def to_dict(self) -> dict:
        return {"learner": self.learner, "opponent_kind": self.opponent_kind,
                "opponent_id": self.opponent_id, "intervention": self.intervention.to_dict(),
                "seed": self.seed}


class League:
    """Both historical pools plus the cross win-rate table. Single owner."""

    def __init__(self, arena_config: A.ArenaConfig, capacity: int = 32,
                 root: str | Path | None = None, pfsp_p: float = 1.0,
                 unknown_winrate: float = 0.5):
        self.config = arena_config
        self.arena_hash = arena_config.shape_key()
        self.capacity = capacity
        self.root = Path(root) if root is not None else None
        self.pfsp_p = pfsp_p
        self.unknown_winrate = unknown_winrate
        self.pools: dict[str, list[PoolEntry]] = {"cat": [], "mouse": []}
        self.cat_wins: dict[str, dict[str, list[int]]] = {}  # cat_id -> mouse_id -> [wins, games]
        self.admitted = {"cat": 0, "mouse": 0}

    # -------------------------------------------------- matrix

    def record(self, cat_id: str, mouse_id: str, cat_won: bool):
        cell = self.cat_wins.setdefault(cat_id, {}).setdefault(mouse_id, [0, 0])
        cell[0] += int(cat_won)
        cell[1] += 1

    def winrate(self, side: str, own_id: str, opp_id: str) -> float | None:
        cat_id, mouse_id = (own_id, opp_id) if side == "cat" else (opp_id, own_id)
        cell = self.cat_wins.get(cat_id, {}).get(mouse_id)
        if not cell or cell[1] == 0:
            return None
        rate = cell[0] / cell[1]
        return rate if side == "cat" else 1.0 - rate

    def row(self, side: str, own_id: str | None) -> list[float]:
        """Win rates of ``own_id`` against every model in the opponent pool."""
        out = []
        for e in self.pools[other(side)]:
            d = self.winrate(side, own_id, e.model_id) if own_id is not None else None
            out.append(self.unknown_winrate if d is None else d)
        return out

    def matrix(self, side: str) -> np.ndarray:
        own = self.pools[side]
        m = np.full((len(own), len(self.pools[other(side)])), np.nan)
        for i, e in enumerate(own):
            for j, o in enumerate(self.pools[other(side)]):
                d = self.winrate(side, e.model_id, o.model_id)
                if d is not None:
                    m[i, j] = d
        return m

    # -------------------------------------------------- selection

    def select_opponent(self, side: str, rng: np.random.Generator, hist_ratio: float = 0.2,
                        seed: int = 0) -> MatchSpec:
        """Latest opponent with probability ``1 - hist_ratio``, else a pFSP draw
        from the opponent pool. Always two uniform draws so the stream is stable."""
        u = rng.random()
        u2 = rng.random()
        pool = self.pools[other(side)]
        if not pool or u >= hist_ratio:
            return MatchSpec(side, "latest", None, seed=seed)
        own = self.pools[side][-1].model_id if self.pools[side] else None
        probs = pfsp_weights(self.row(side, own), self.pfsp_p)
        idx = int(np.searchsorted(np.cumsum(probs), u2 * probs.sum(), side="right"))
        idx = min(idx, len(pool) - 1)
        while probs[idx] == 0 and idx > 0:
            idx -= 1
        return MatchSpec(side, "hmp", pool[idx].model_id, seed=seed)

    def entry(self, side: str, model_id: str) -> PoolEntry:
        for e in self.pools[side]:
            if e.model_id == model_id:
                return e
        raise KeyError(model_id)

    def params_of(self, side: str, model_id: str) -> NetworkParams:
        e = self.entry(side, model_id)
        if e.params is None:
            if self.root is None or not e.file:
                raise LeagueError(f"no parameters stored for {model_id}")
            e.params = snapshot.load(self.root / e.file, self.arena_hash)
        return e.params

    # -------------------------------------------------- admission

    def admit(self, params: NetworkParams, n_games: int = 8, seed: int = 0,
              play=None) -> PoolEntry:
        """Add a snapshot to its side's pool after playing ``n_games`` against
        every model in the opponent pool. ``play(cat, mouse, n, seed)`` returns
        a list of booleans (cat won); defaults to seeded network games."""
        side = params.side
        if side not in SIDES:
            raise LeagueError(f"bad side tag {side!r}")
        if params.arena_hash != self.arena_hash:
            raise LeagueError(f"arena hash mismatch: {params.arena_hash} != {self.arena_hash}")
        self.admitted[side] += 1
        model_id = f"{side}-{self.admitted[side]:05d}-s{params.step}"
        entry = PoolEntry(model_id, side, self.admitted[side], params.step, params=params)
        play = play or self._play_nets
        for j, opp in enumerate(self.pools[other(side)]):
            opp_params = self.params_of(other(side), opp.model_id)
            cat, mouse = (params, opp_params) if side == "cat" else (opp_params, params)
            outcomes = play(cat, mouse, n_games, seed * 1000003 + self.admitted[side] * 101 + j)
            cat_id, mouse_id = (model_id, opp.model_id) if side == "cat" else (opp.model_id, model_id)
            for cat_won in outcomes:
                self.record(cat_id, mouse_id, bool(cat_won))
                if side == "cat":
                    w, l_ = (entry, opp) if cat_won else (opp, entry)
                else:
                    w, l_ = (opp, entry) if cat_won else (entry, opp)
                w.rating, l_.rating = trueskill_update(w.rating, l_.rating)
        self.pools[side].append(entry)
        if self.root is not None:
            entry.file = f"{model_id}.snap"
            self.root.mkdir(parents=True, exist_ok=True)
            snapshot.save(params, self.root / entry.file)
        while len(self.pools[side]) > self.capacity:
            self._evict(side)
        if self.root is not None:
            self.save()
        return entry

    def _evict(self, side: str):
        old = self.pools[side].pop(0)
        if side == "cat":
            self.cat_wins.pop(old.model_id, None)
        else:
            for row in self.cat_wins.values():
                row.pop(old.model_id, None)
        if self.root is not None and old.file:
            (self.root / old.file).unlink(missing_ok=True)

    def _play_nets(self, cat: NetworkParams, mouse: NetworkParams, n: int, seed: int):
        res = play_match(self.config, NetPolicy(cat), NetPolicy(mouse), n, seed)
        return [r.cat_won for r in res if r.error is None]

    # -------------------------------------------------- persistence

    def manifest(self) -> dict:
        return {
            "arena_hash": self.arena_hash,
            "capacity": self.capacity,
            "admitted": dict(self.admitted),
            "pools": {s: [e.to_dict() for e in self.pools[s]] for s in SIDES},
            "cat_wins": self.cat_wins,
        }

    def save(self):
        if self.root is None:
            raise LeagueError("league has no root directory")
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        tmp.replace(self.root / "manifest.json")

    @classmethod
    def load(cls, root, arena_config: A.ArenaConfig, **kw) -> "League":
        root = Path(root)
        m = json.loads((root / "manifest.json").read_text())
        if m["arena_hash"] != arena_config.shape_key():
            raise LeagueError("pool was built for a different arena")
        lg = cls(arena_config, m["capacity"], root, **kw)
        lg.admitted = m["admitted"]
        lg.cat_wins = m["cat_wins"]
        for s in SIDES:
            for d in m["pools"][s]:
                lg.pools[s].append(PoolEntry(d["model_id"], d["side"], d["version"], d["step"],
                                             Rating(**d["rating"]), d["file"]))
        return lg


# ------------------------------------------------------------------ evaluation


def evaluate_winrates(config: A.ArenaConfig, cat, mouse, n_games: int, seed: int = 0):
    """Seeded games with environment randomization off; returns ``(w_cat, w_mouse)``."""
    if n_games <= 0:
        return 0.0, 0.0
    res = [r for r in play_match(config, cat, mouse, n_games, seed) if r.error is None]
    if not res:
        return 0.0, 0.0
    wc = sum(r.cat_won for r in res) / len(res)
    return wc, 1.0 - wc
