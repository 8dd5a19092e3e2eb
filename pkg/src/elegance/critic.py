"""Elegance critic ``Q(s, A)`` trained offline with calibrated conservative
Q-learning against a softly updated target network.

The loss functions take policy-sampled candidate chunks as explicit arrays
(``[batch, M, chunk_dim]``) so they are pure functions of their inputs;
``train_critic`` draws fresh candidates every step.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from elegance import ConfigError, NumericError
from elegance.numerics import (AdamWState, MlpParams, adamw_step, clip_grad_norm, init_mlp,
                               mlp_backward, mlp_forward, mlp_forward_cached, mlp_from_dict,
                               mlp_to_dict)
from elegance.demos import chained_returns
from elegance.policy import PolicyNet, integrate
from elegance.seeding import rng_for
from elegance.world import ACTION_DIM, featurize, relative_dim

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "bellman_loss", "cal_reg", "mean_q_data", "mean_q_pi")


@dataclass
class CalQLConfig:
    gamma: float = 0.98
    lambda_cal: float = 5.0
    rho: float = 5e-3
    m_policy_samples: int = 4
    batch_size: int = 32
    steps: int = 3000
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.5
    hidden: tuple[int, ...] = (256, 256)
    log_interval: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.lambda_cal < 0:
            raise ConfigError("lambda_cal must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.m_policy_samples < 1:
            raise ConfigError("m_policy_samples must be >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")


@dataclass
class CriticNet:
    net: MlpParams
    obs_dim: int
    K: int
    action_dim: int = ACTION_DIM
    gamma: float = 0.98
    lambda_cal: float = 5.0
    layout: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.layout is not None:
            self.layout = tuple(self.layout)
        feat = self.obs_dim + relative_dim(self.layout)
        if self.net.in_dim != feat + self.K * self.action_dim or self.net.out_dim != 1:
            raise ConfigError(f"critic net dims {self.net.dims} do not fit obs_dim={self.obs_dim}, "
                              f"K={self.K}, action_dim={self.action_dim}")

    @property
    def chunk_dim(self) -> int:
        return self.K * self.action_dim

    def copy(self) -> "CriticNet":
        return CriticNet(self.net.copy(), self.obs_dim, self.K, self.action_dim, self.gamma, self.lambda_cal,
                         self.layout)


@dataclass
class TargetNet:
    net: MlpParams
    layout: tuple[int, int] | None = None

    @classmethod
    def of(cls, critic: CriticNet) -> "TargetNet":
        return cls(critic.net.copy(), critic.layout)


@dataclass
class CriticBatch:
    """Rows of ``(s, A, r, s', done, V_mu)``; ``next_actions`` (optional) is the
    dataset chunk taken at ``s'`` and joins the backup maximum."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    v_mu: np.ndarray
    next_actions: np.ndarray | None = None
    has_next: np.ndarray | None = None


def init_critic(obs_dim: int, K: int, config: CalQLConfig, seed: int, action_dim: int = ACTION_DIM,
                layout: tuple[int, int] | None = None) -> CriticNet:
    dims = [obs_dim + relative_dim(layout) + K * action_dim, *config.hidden, 1]
    net = init_mlp(dims, rng_for(seed, "critic-init"))
    return CriticNet(net, obs_dim, K, action_dim, config.gamma, config.lambda_cal, layout)


def _inputs(obs: np.ndarray, actions: np.ndarray, layout=None) -> np.ndarray:
    return np.concatenate([featurize(obs, layout), np.atleast_2d(actions)], axis=1)


def _q(net: MlpParams, obs: np.ndarray, actions: np.ndarray, layout=None) -> np.ndarray:
    return mlp_forward(net, _inputs(obs, actions, layout))[:, 0]


def q_values(critic: CriticNet, obs, actions) -> np.ndarray:
    """Q for each row; a single observation is broadcast over many chunks."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if obs.shape[1] != critic.obs_dim or actions.shape[1] != critic.chunk_dim:
        raise ConfigError(f"critic expects obs_dim={critic.obs_dim}, chunk_dim={critic.chunk_dim}; "
                          f"got {obs.shape[1]}, {actions.shape[1]}")
    if len(obs) == 1 and len(actions) > 1:
        obs = np.repeat(obs, len(actions), axis=0)
    q = _q(critic.net, obs, actions, critic.layout)
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite critic value")
    return q


def q_value(critic: CriticNet, obs, chunk) -> float:
    return float(q_values(critic, obs, chunk)[0])


def mc_returns(dataset, gamma: float) -> np.ndarray:
    """Discounted Monte-Carlo return-to-go of every transition, following the
    dataset's next-chunk links (``-1`` ends an episode)."""
    nxt = np.asarray(dataset.next_index)
    episode = np.asarray(dataset.episode)
    if not (len(nxt) == len(episode) == len(dataset.rewards)):
        raise ConfigError("rewards, episode ids and links must align")
    linked = nxt >= 0
    if np.any(nxt[linked] >= len(nxt)) or np.any(episode[nxt[linked]] != episode[linked]):
        raise ConfigError("broken episode linkage: a transition links outside its episode")
    return chained_returns(dataset.rewards, nxt, gamma)


def backup_targets(target: TargetNet, batch: CriticBatch, next_candidates: np.ndarray, gamma: float) -> np.ndarray:
    """``r + gamma (1 - done) max_a' Q'(s', a')`` over the candidate set (plus
    the dataset next action where one exists)."""
    B, M, _ = next_candidates.shape
    obs_rep = np.repeat(batch.next_obs, M, axis=0)
    q_next = _q(target.net, obs_rep, next_candidates.reshape(B * M, -1), target.layout).reshape(B, M)
    best = q_next.max(axis=1)
    if batch.next_actions is not None:
        q_data = _q(target.net, batch.next_obs, batch.next_actions, target.layout)
        has = np.ones(B, dtype=bool) if batch.has_next is None else batch.has_next
        best = np.where(has, np.maximum(best, q_data), best)
    done = batch.done.astype(np.float64)
    return batch.rewards + gamma * (1.0 - done) * best


def bellman_loss(critic: CriticNet, target: TargetNet, batch: CriticBatch, next_candidates: np.ndarray,
                 gamma: float | None = None) -> tuple[float, MlpParams]:
    """Mean squared residual against the (constant) backup target."""
    gamma = critic.gamma if gamma is None else gamma
    y = backup_targets(target, batch, next_candidates, gamma)
    x = _inputs(batch.obs, batch.actions, critic.layout)
    q, cache = mlp_forward_cached(critic.net, x)
    resid = q[:, 0] - y
    loss = float(np.mean(resid ** 2))
    if not np.isfinite(loss):
        raise NumericError("non-finite Bellman loss")
    grads, _ = mlp_backward(critic.net, x, (2.0 * resid / len(resid))[:, None], cache)
    return loss, grads


def cal_reg(critic: CriticNet, batch: CriticBatch, pi_candidates: np.ndarray) -> tuple[float, MlpParams]:
    """``mean(max(E_pi Q(s, .), V_mu(s)) - Q(s, A_data))``.

    The policy term carries gradient only on rows where it attains the max.
    """
    B, M, _ = pi_candidates.shape
    x_pi = _inputs(np.repeat(batch.obs, M, axis=0), pi_candidates.reshape(B * M, -1), critic.layout)
    x_d = _inputs(batch.obs, batch.actions, critic.layout)
    x = np.concatenate([x_pi, x_d])
    q, cache = mlp_forward_cached(critic.net, x)
    q_pi = q[:B * M, 0].reshape(B, M)
    q_d = q[B * M:, 0]
    e_pi = q_pi.mean(axis=1)
    active = e_pi >= batch.v_mu
    value = float(np.mean(np.maximum(e_pi, batch.v_mu) - q_d))
    if not np.isfinite(value):
        raise NumericError("non-finite calibration regulariser")
    up = np.zeros(len(x))
    up[:B * M] = np.repeat(active / (B * M), M)
    up[B * M:] = -1.0 / B
    grads, _ = mlp_backward(critic.net, x, up[:, None], cache)
    return value, grads


def calql_loss(critic: CriticNet, target: TargetNet, batch: CriticBatch, next_candidates: np.ndarray,
               pi_candidates: np.ndarray, lambda_cal: float | None = None,
               gamma: float | None = None) -> tuple[float, MlpParams, dict]:
    """Bellman loss plus ``lambda_cal`` times the calibration regulariser."""
    lam = critic.lambda_cal if lambda_cal is None else lambda_cal
    lb, gb = bellman_loss(critic, target, batch, next_candidates, gamma)
    lr_, gr = cal_reg(critic, batch, pi_candidates)
    grads = gb.with_arrays([a + lam * b for a, b in zip(gb.arrays(), gr.arrays())])
    return lb + lam * lr_, grads, {"bellman_loss": lb, "cal_reg": lr_}


def soft_update(target: TargetNet, online: CriticNet | MlpParams, rho: float) -> TargetNet:
    src = online.net if isinstance(online, CriticNet) else online
    if src.dims != target.net.dims:
        raise ConfigError(f"target dims {target.net.dims} != online dims {src.dims}")
    mixed = [rho * a + (1.0 - rho) * b for a, b in zip(src.arrays(), target.net.arrays())]
    return TargetNet(target.net.with_arrays(mixed), target.layout)


def policy_candidates(policy: PolicyNet, obs: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """``[batch, m, chunk_dim]`` fresh policy samples for every row of ``obs``."""
    B = len(obs)
    noise = rng.standard_normal((B * m, policy.chunk_dim))
    return integrate(policy, np.repeat(obs, m, axis=0), noise).reshape(B, m, -1)


def dataset_batch(dataset, idx: np.ndarray) -> CriticBatch:
    nxt = dataset.next_index[idx]
    has = nxt >= 0
    next_actions = dataset.actions[np.where(has, nxt, idx)]
    return CriticBatch(dataset.obs[idx], dataset.actions[idx], dataset.rewards[idx], dataset.next_obs[idx],
                       dataset.done[idx], dataset.mc_return[idx], next_actions, has)


@dataclass
class CriticResult:
    critic: CriticNet
    target: TargetNet
    log: list[dict] = field(default_factory=list)


def train_critic(dataset, policy: PolicyNet, config: CalQLConfig, seed: int,
                 init: CriticNet | None = None) -> CriticResult:
    """AdamW on the calibrated loss, one soft target update after every step.

    ``dataset`` needs obs/actions/rewards/next_obs/done/episode/next_index
    arrays; V_mu is recomputed from the rewards with ``config.gamma``.
    """
    if len(dataset.rewards) == 0:
        raise ConfigError("empty critic dataset")
    if policy.chunk_dim != dataset.actions.shape[1] or policy.obs_dim != dataset.obs.shape[1]:
        raise ConfigError("policy and dataset dimensions disagree")
    if init is None:
        init = init_critic(dataset.obs.shape[1], policy.K, config, seed, layout=policy.layout)
    critic = init.copy()
    critic.gamma, critic.lambda_cal = config.gamma, config.lambda_cal
    target = TargetNet.of(critic)
    v_mu = mc_returns(dataset, config.gamma)
    if not np.isclose(getattr(dataset, "gamma", config.gamma), config.gamma):
        log.info("dataset gamma %.4g differs from critic gamma %.4g; using recomputed returns",
                 dataset.gamma, config.gamma)
    rng = rng_for(seed, "critic-train")
    opt = AdamWState.for_params(critic.net, lr=config.lr, weight_decay=config.weight_decay)
    history: list[dict] = []
    n = len(dataset.rewards)
    for it in range(1, config.steps + 1):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        batch = dataset_batch(dataset, idx)
        batch.v_mu = v_mu[idx]
        m = config.m_policy_samples
        next_c = policy_candidates(policy, batch.next_obs, m, rng)
        pi_c = policy_candidates(policy, batch.obs, m, rng)
        total, grads, parts = calql_loss(critic, target, batch, next_c, pi_c, config.lambda_cal, config.gamma)
        if not np.isfinite(total) or total > 1e6:
            raise NumericError(f"critic training diverged at step {it}: loss {total:.3g}")
        if config.grad_clip > 0:
            grads = clip_grad_norm(grads, config.grad_clip)
        critic.net, opt = adamw_step(critic.net, grads, opt)
        target = soft_update(target, critic, config.rho)
        if it % config.log_interval == 0:
            q_d = _q(critic.net, batch.obs, batch.actions, critic.layout)
            q_pi = _q(critic.net, np.repeat(batch.obs, m, axis=0), pi_c.reshape(len(idx) * m, -1), critic.layout)
            history.append({"step": it, "bellman_loss": parts["bellman_loss"], "cal_reg": parts["cal_reg"],
                            "mean_q_data": float(q_d.mean()), "mean_q_pi": float(q_pi.mean())})
    return CriticResult(critic, target, history)


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


def save_critic(critic: CriticNet, path: str | Path, target: TargetNet | None = None,
                training_tasks: list[str] | None = None) -> None:
    """Checkpoint ``<path>`` (MLP JSON), sidecar ``<path>.meta.json``, and the
    target network as ``<path>.target`` when given. ``training_tasks`` lands in
    the sidecar so evaluations can audit what the critic has seen."""
    path = Path(path)
    path.write_text(json.dumps(mlp_to_dict(critic.net)))
    meta = {"gamma": critic.gamma, "lambda_cal": critic.lambda_cal, "K": critic.K,
            "obs_dim": critic.obs_dim, "action_dim": critic.action_dim,
            "layout": None if critic.layout is None else list(critic.layout)}
    if training_tasks is not None:
        meta["training_tasks"] = sorted(training_tasks)
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True))
    if target is not None:
        Path(str(path) + ".target").write_text(json.dumps(mlp_to_dict(target.net)))


def critic_meta(path: str | Path) -> dict:
    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise ConfigError(f"missing critic checkpoint sidecar {meta_path}")
    return json.loads(meta_path.read_text())


def load_critic(path: str | Path) -> CriticNet:
    path = Path(path)
    meta_path = Path(str(path) + ".meta.json")
    if not path.exists() or not meta_path.exists():
        raise ConfigError(f"missing critic checkpoint {path}")
    meta = json.loads(meta_path.read_text())
    net = mlp_from_dict(json.loads(path.read_text()))
    layout = meta.get("layout")
    return CriticNet(net, meta["obs_dim"], meta["K"], meta["action_dim"], meta["gamma"], meta["lambda_cal"],
                     None if layout is None else tuple(layout))


def critic_to_dict(critic: CriticNet) -> dict:
    return {"K": critic.K, "action_dim": critic.action_dim, "obs_dim": critic.obs_dim,
            "gamma": critic.gamma, "lambda_cal": critic.lambda_cal,
            "layout": None if critic.layout is None else list(critic.layout), "net": mlp_to_dict(critic.net)}
