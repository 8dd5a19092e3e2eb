"""Flow-matching action-chunk policy.

The vector field ``v(A_tau, s, tau)`` is an MLP over ``[obs, noisy chunk, tau]``.
Chunks live in the normalised action space (every component in [-1, 1]);
``tau = 1`` is the clean action and ``tau = 0`` pure noise.
"""
from __future__ import annotations

import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from elegance import ConfigError, NumericError
from elegance.numerics import (AdamWState, MlpParams, adamw_step, init_mlp, mlp_backward,
                               mlp_forward, mlp_forward_cached, mlp_from_dict, mlp_to_dict)
from elegance.seeding import derive_seed, rng_for
from elegance.world import ACTION_DIM, featurize, relative_dim

log = logging.getLogger(__name__)


@dataclass
class FlowConfig:
    euler_steps: int = 10
    hidden: tuple[int, ...] = (256, 256)
    batch_size: int = 256
    steps: int = 6000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    holdout: float = 0.1
    log_interval: int = 100
    cosine: bool = True

    def __post_init__(self) -> None:
        if self.euler_steps < 1:
            raise ConfigError("euler_steps must be >= 1")


@dataclass
class PolicyNet:
    net: MlpParams
    obs_dim: int
    K: int
    action_dim: int = ACTION_DIM
    euler_steps: int = 10
    layout: tuple[int, int] | None = None
    log: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.layout is not None:
            self.layout = tuple(self.layout)
        feat = self.obs_dim + relative_dim(self.layout)
        if self.net.in_dim != feat + self.chunk_dim + 1 or self.net.out_dim != self.chunk_dim:
            raise ConfigError(f"policy net dims {self.net.dims} do not fit obs_dim={self.obs_dim}, "
                              f"K={self.K}, action_dim={self.action_dim}")
        if self.euler_steps < 1:
            raise ConfigError("euler_steps must be >= 1")

    @property
    def chunk_dim(self) -> int:
        return self.K * self.action_dim


def init_policy(obs_dim: int, K: int, config: FlowConfig, seed: int, action_dim: int = ACTION_DIM,
                layout: tuple[int, int] | None = None) -> PolicyNet:
    dims = [obs_dim + relative_dim(layout) + K * action_dim + 1, *config.hidden, K * action_dim]
    net = init_mlp(dims, rng_for(seed, "policy-init"))
    return PolicyNet(net, obs_dim, K, action_dim, config.euler_steps, layout)


def interpolate(actions: np.ndarray, noise: np.ndarray, tau) -> np.ndarray:
    """``A_tau = tau * A + (1 - tau) * eps`` (row-wise tau)."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 1:
        tau = tau[:, None]
    return tau * actions + (1.0 - tau) * noise


def _field_input(policy: PolicyNet, obs: np.ndarray, a_tau: np.ndarray, tau: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([featurize(obs, policy.layout), a_tau, tau], axis=1)


def fm_loss(policy: PolicyNet, obs: np.ndarray, actions: np.ndarray, tau: np.ndarray,
            noise: np.ndarray) -> tuple[float, MlpParams]:
    """Mean over batch and coordinates of ``(v(A_tau, s, tau) - (A - eps))**2``."""
    obs = np.atleast_2d(obs)
    actions = np.atleast_2d(actions)
    noise = np.atleast_2d(noise)
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if len(obs) == 0:
        raise ConfigError("empty batch")
    x = _field_input(policy, obs, interpolate(actions, noise, tau), tau)
    pred, cache = mlp_forward_cached(policy.net, x)
    resid = pred - (actions - noise)
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise NumericError("flow-matching loss is not finite")
    grads, _ = mlp_backward(policy.net, x, 2.0 * resid / resid.size, cache)
    return loss, grads


def fm_loss_value(policy: PolicyNet, obs, actions, tau, noise) -> float:
    obs, actions, noise = np.atleast_2d(obs), np.atleast_2d(actions), np.atleast_2d(noise)
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    pred = mlp_forward(policy.net, _field_input(policy, obs, interpolate(actions, noise, tau), tau))
    resid = pred - (actions - noise)
    return float(np.mean(resid * resid))


def train_policy(dataset, config: FlowConfig, seed: int, init: PolicyNet | None = None,
                 K: int | None = None, layout: tuple[int, int] | None = None) -> PolicyNet:
    """Fit the vector field on the dataset's (observation, chunk) pairs with AdamW.

    Any object with aligned ``obs`` and ``actions`` arrays works as ``dataset``.
    A held-out split is scored every ``log_interval`` steps into ``policy.log``
    (one row per interval, so ``steps // log_interval`` rows).
    """
    obs = np.asarray(dataset.obs, dtype=np.float64)
    actions = np.asarray(dataset.actions, dtype=np.float64)
    K = K or getattr(dataset, "K", None)
    if len(obs) != len(actions) or len(obs) == 0:
        raise ConfigError("observations and actions must be non-empty and aligned")
    if init is None:
        if K is None:
            K = actions.shape[1] // ACTION_DIM
        init = init_policy(obs.shape[1], K, config, seed, layout=layout)
    policy = PolicyNet(init.net.copy(), init.obs_dim, init.K, init.action_dim, config.euler_steps, init.layout)
    if config.steps == 0:
        return policy
    rng = rng_for(seed, "policy-train")
    order = rng.permutation(len(obs))
    n_hold = int(round(config.holdout * len(obs))) if len(obs) > 10 else 0
    hold, train = order[:n_hold], order[n_hold:]
    hold_rng = rng_for(seed, "policy-holdout")
    h_tau = hold_rng.uniform(size=len(hold))
    h_eps = hold_rng.standard_normal((len(hold), policy.chunk_dim))

    def held_out() -> float | None:
        if not len(hold):
            return None
        return fm_loss_value(policy, obs[hold], actions[hold], h_tau, h_eps)

    opt = AdamWState.for_params(policy.net, lr=config.lr, weight_decay=config.weight_decay)
    history: list[dict] = []
    for it in range(1, config.steps + 1):
        idx = train[rng.integers(0, len(train), size=min(config.batch_size, len(train)))]
        tau = rng.uniform(size=len(idx))
        eps = rng.standard_normal((len(idx), policy.chunk_dim))
        loss, grads = fm_loss(policy, obs[idx], actions[idx], tau, eps)
        if loss > 1e3:
            raise NumericError(f"policy training diverged at step {it}: loss {loss:.3g}")
        if config.cosine:
            opt.lr = cosine_lr(config.lr, it, config.steps)
        net, opt = adamw_step(policy.net, grads, opt)
        policy.net = net
        if it % config.log_interval == 0:
            history.append({"step": it, "train_loss": loss, "holdout_loss": held_out()})
    policy.log = history
    return policy


def cosine_lr(peak: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from ``peak`` to ``floor * peak`` over ``total`` steps."""
    frac = min(step / max(total, 1), 1.0)
    return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def integrate(policy: PolicyNet, obs: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Forward-Euler transport of ``noise`` rows from tau=0 to tau=1, clamped to [-1, 1]."""
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if len(obs) == 1 and len(noise) > 1:
        obs = np.repeat(obs, len(noise), axis=0)
    a = noise.copy()
    dt = 1.0 / policy.euler_steps
    for i in range(policy.euler_steps):
        tau = np.full(len(a), i * dt)
        a = a + dt * mlp_forward(policy.net, _field_input(policy, obs, a, tau))
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite action sample")
    return np.clip(a, -1.0, 1.0)


def sample_action(policy: PolicyNet, obs: np.ndarray, seed: int) -> np.ndarray:
    noise = np.random.default_rng(seed).standard_normal(policy.chunk_dim)
    return integrate(policy, obs, noise[None, :])[0]


def candidate_noise(policy: PolicyNet, seed: int, start: int, n: int) -> np.ndarray:
    return np.stack([np.random.default_rng(derive_seed(seed, i)).standard_normal(policy.chunk_dim)
                     for i in range(start, start + n)])


def sample_candidates(policy: PolicyNet, obs: np.ndarray, n: int, seed: int, start: int = 0) -> np.ndarray:
    """``n`` chunks whose noise comes from sub-seeds ``derive_seed(seed, i)``,
    ``i = start .. start+n-1``. Index 0 is the default action."""
    if n < 1:
        raise ConfigError("need at least one candidate")
    return integrate(policy, obs, candidate_noise(policy, seed, start, n))


def policy_to_dict(policy: PolicyNet) -> dict:
    return {"K": policy.K, "action_dim": policy.action_dim, "obs_dim": policy.obs_dim,
            "euler_steps": policy.euler_steps, "layout": _layout_json(policy.layout),
            "net": mlp_to_dict(policy.net)}


def save_policy(policy: PolicyNet, path: str | Path) -> None:
    """Checkpoint ``<path>`` (MLP JSON) plus sidecar ``<path>.meta.json``."""
    path = Path(path)
    path.write_text(json.dumps(mlp_to_dict(policy.net)))
    meta = {"K": policy.K, "action_dim": policy.action_dim, "obs_dim": policy.obs_dim,
            "euler_steps": policy.euler_steps, "layout": _layout_json(policy.layout)}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True))


def load_policy(path: str | Path) -> PolicyNet:
    path = Path(path)
    meta_path = Path(str(path) + ".meta.json")
    if not path.exists() or not meta_path.exists():
        raise ConfigError(f"missing policy checkpoint {path}")
    meta = json.loads(meta_path.read_text())
    net = mlp_from_dict(json.loads(path.read_text()))
    return PolicyNet(net, meta["obs_dim"], meta["K"], meta["action_dim"], meta["euler_steps"],
                     _layout_from_json(meta.get("layout")))


def _layout_json(layout):
    return None if layout is None else list(layout)


def _layout_from_json(value):
    return None if value is None else tuple(value)
