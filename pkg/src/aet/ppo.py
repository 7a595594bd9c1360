"""Dual-clip PPO: advantages, surrogate and value losses, entropy bonus, batches."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .nn import engine as E
from .nn.model import DIRECTIONAL_MASK, NetworkParams, ObsBatch, forward


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    dual_clip: float = 3.0
    gamma: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    traj_len: int = 128
    reuse_cap: float = 1.2
    normalize_advantages: bool = True

    def validate(self):
        errs = []
        if not 0 < self.clip_eps < 1:
            errs.append("clip_eps must be in (0, 1)")
        if not self.dual_clip > 1:
            errs.append("dual_clip must be > 1")
        if not 0 < self.gamma <= 1:
            errs.append("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            errs.append("lam must be in [0, 1]")
        if self.traj_len < 1:
            errs.append("traj_len must be >= 1")
        if self.reuse_cap < 1:
            errs.append("reuse_cap must be >= 1")
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ pure math


def compute_gae(rewards, values, dones, bootstrap, gamma, lam) -> np.ndarray:
    """Backward GAE recursion; ``bootstrap`` is V of the state after the last step."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape) or rewards.ndim != 1:
        raise ValueError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, "
                         f"dones {dones.shape}")
    return _kernels.gae(rewards, values, dones, bootstrap, gamma, lam)


def ratio(new_logp, old_logp):
    return np.exp(np.asarray(new_logp, dtype=np.float64) - np.asarray(old_logp, dtype=np.float64))


def dual_clip_terms(ratios, advantages, eps: float, eta: float) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    surr = np.minimum(r * adv, np.clip(r, 1 - eps, 1 + eps) * adv)
    return np.where(adv < 0, np.maximum(surr, eta * adv), surr)


def dual_clip_policy_loss(ratios, advantages, eps: float = 0.2, eta: float = 3.0) -> float:
    return float(-np.mean(dual_clip_terms(ratios, advantages, eps, eta)))


def value_loss(values, returns) -> float:
    d = np.asarray(values, dtype=np.float64) - np.asarray(returns, dtype=np.float64)
    return float(np.mean(d * d))


def normalize(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean() if adv.size else adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    """Flat transitions ready for a loss evaluation."""

    obs: ObsBatch  # value observations (policy part plus invisible block)
    actions: np.ndarray
    directions: np.ndarray
    logp_old: np.ndarray
    v_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(self.obs.take(idx), self.actions[idx], self.directions[idx],
                     self.logp_old[idx], self.v_old[idx], self.advantages[idx], self.returns[idx])

    @classmethod
    def concat(cls, parts) -> "Batch":
        parts = list(parts)
        return cls(ObsBatch.concat(p.obs for p in parts),
                   *(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("actions", "directions", "logp_old", "v_old", "advantages",
                               "returns")))


# ------------------------------------------------------------------ graph losses


def policy_loss_graph(logp_new: E.Tensor, logp_old, adv, eps: float, eta: float) -> E.Tensor:
    dt = logp_new.data.dtype
    adv_t = E.Tensor(np.asarray(adv, dtype=dt))
    r = E.exp(E.add(logp_new, E.Tensor(-np.asarray(logp_old, dtype=dt))))
    surr = E.minimum(E.mul(r, adv_t), E.mul(E.clip(r, 1 - eps, 1 + eps), adv_t))
    floor = E.Tensor(eta * adv_t.data)
    term = E.where(adv_t.data < 0, E.maximum(surr, floor), surr)
    return E.neg(E.mean(term))


def joint_entropy_graph(logp_action: E.Tensor, logp_direction: E.Tensor, amask, dmask) -> E.Tensor:
    """Per-row entropy of the (action, direction) policy; the direction head
    only counts with the probability of choosing a directional action."""
    h_a = E.softmax_entropy(logp_action, amask)
    h_d = E.softmax_entropy(logp_direction, dmask)
    pa = E.exp(logp_action)
    p_dir = E.sum_(E.mul(pa, E.Tensor(DIRECTIONAL_MASK.astype(pa.data.dtype))), axis=-1)
    return E.add(h_a, E.mul(p_dir, h_d))


def selected_logp_graph(logp_action: E.Tensor, logp_direction: E.Tensor, actions, directions):
    la = E.gather_last(logp_action, actions)
    ld = E.gather_last(logp_direction, directions)
    use = DIRECTIONAL_MASK[np.asarray(actions)]
    return E.add(la, E.mul(ld, E.Tensor(use.astype(ld.data.dtype))))


def total_loss(batch: Batch, params: NetworkParams, cfg: PPOConfig, advantages=None):
    """``L_policy + c_v * L_value - c_e * mean entropy`` as a graph tensor.

    ``advantages`` overrides ``batch.advantages`` (used when normalization was
    done over a larger batch than this chunk). Returns ``(loss, parts)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    adv = batch.advantages if advantages is None else advantages
    out = forward(params, batch.obs)
    logp = selected_logp_graph(out["logp_action"], out["logp_direction"], batch.actions,
                               batch.directions)
    pl = policy_loss_graph(logp, batch.logp_old, adv, cfg.clip_eps, cfg.dual_clip)
    dt = params.dtype
    vl = E.mean(E.square(E.add(out["value"], E.Tensor(-batch.returns.astype(dt)))))
    ent = E.mean(joint_entropy_graph(out["logp_action"], out["logp_direction"],
                                     batch.obs.action_mask, batch.obs.direction_mask))
    loss = E.add(E.add(pl, E.scale(vl, cfg.value_coef)), E.scale(ent, -cfg.entropy_coef))
    parts = {"policy_loss": float(pl.data), "value_loss": float(vl.data),
             "entropy": float(ent.data), "loss": float(loss.data),
             "ratio_mean": float(np.mean(np.exp(logp.data - batch.logp_old)))}
    return loss, parts


def loss_and_grads(params: NetworkParams, batch: Batch, cfg: PPOConfig, chunk: int = 512):
    """Accumulate gradients of the batch-mean loss over memory-sized chunks."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    adv = normalize(batch.advantages) if cfg.normalize_advantages else batch.advantages
    params.zero_grad()
    n = len(batch)
    totals: dict = {}
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(n, lo + chunk))
        w = len(idx) / n
        loss, parts = total_loss(batch.take(idx), params, cfg, advantages=adv[idx])
        E.scale(loss, w).backward()
        for k, v in parts.items():
            totals[k] = totals.get(k, 0.0) + w * v
    return params.grads(), totals
