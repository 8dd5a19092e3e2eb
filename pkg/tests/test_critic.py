import numpy as np
import pytest

from elegance import ConfigError
from elegance.critic import (CalQLConfig, CriticBatch, TargetNet, backup_targets, bellman_loss, cal_reg,
                             calql_loss, critic_meta, init_critic, load_critic, mc_returns, q_values, save_critic,
                             soft_update, train_critic)
from elegance.demos import build_dataset
from elegance.numerics import finite_diff_grad, mlp_forward, params_rel_error

OBS, K, CH = 4, 2, 8


def make(seed, v_mu_shift=0.0, with_next=True):
    rng = np.random.default_rng(seed)
    critic = init_critic(OBS, K, CalQLConfig(hidden=(6,), gamma=0.9, lambda_cal=2.0), seed=seed)
    target = TargetNet.of(critic)
    target = TargetNet(target.net.with_arrays([a + 0.1 * rng.normal(size=a.shape) for a in target.net.arrays()]))
    B, M = 5, 3
    batch = CriticBatch(
        obs=rng.normal(size=(B, OBS)), actions=rng.uniform(-1, 1, (B, CH)), rewards=rng.integers(0, 2, B) * 1.0,
        next_obs=rng.normal(size=(B, OBS)), done=rng.uniform(size=B) < 0.3,
        v_mu=rng.normal(size=B) + v_mu_shift,
        next_actions=rng.uniform(-1, 1, (B, CH)) if with_next else None,
        has_next=(rng.uniform(size=B) < 0.7) if with_next else None)
    return critic, target, batch, rng.uniform(-1, 1, (B, M, CH)), rng.uniform(-1, 1, (B, M, CH))


def q_oracle(net, s, a):
    return float(mlp_forward(net, np.concatenate([s, a]))[0])


def test_backup_matches_loop_oracle():
    critic, target, batch, nxt, _ = make(0)
    y = backup_targets(target, batch, nxt, 0.9)
    for i in range(len(y)):
        qs = [q_oracle(target.net, batch.next_obs[i], c) for c in nxt[i]]
        if batch.has_next[i]:
            qs.append(q_oracle(target.net, batch.next_obs[i], batch.next_actions[i]))
        want = batch.rewards[i] + (0.0 if batch.done[i] else 0.9 * max(qs))
        assert y[i] == pytest.approx(want, abs=1e-12)


def test_backup_without_dataset_next_action():
    critic, target, batch, nxt, _ = make(1, with_next=False)
    y = backup_targets(target, batch, nxt, 0.9)
    i = int(np.flatnonzero(~batch.done)[0])
    assert y[i] == pytest.approx(batch.rewards[i] + 0.9 * max(q_oracle(target.net, batch.next_obs[i], c)
                                                              for c in nxt[i]))


def test_cal_reg_value_oracle():
    critic, _, batch, _, pi = make(2)
    val, _ = cal_reg(critic, batch, pi)
    terms = []
    for i in range(len(batch.obs)):
        e_pi = np.mean([q_oracle(critic.net, batch.obs[i], c) for c in pi[i]])
        terms.append(max(e_pi, batch.v_mu[i]) - q_oracle(critic.net, batch.obs[i], batch.actions[i]))
    assert val == pytest.approx(np.mean(terms), abs=1e-12)


@pytest.mark.parametrize("shift", [-50.0, 50.0, 0.0])
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed, shift):
    # shift -50: policy branch everywhere; +50: V_mu branch everywhere
    critic, target, batch, nxt, pi = make(seed, v_mu_shift=shift)

    def with_net(net):
        c = critic.copy()
        c.net = net
        return c

    total, g, parts = calql_loss(critic, target, batch, nxt, pi)
    fd = finite_diff_grad(lambda n: calql_loss(with_net(n), target, batch, nxt, pi)[0], critic.net)
    assert params_rel_error(g, fd) < 1e-4
    assert total == pytest.approx(parts["bellman_loss"] + 2.0 * parts["cal_reg"])
    _, gb = bellman_loss(critic, target, batch, nxt)
    assert params_rel_error(gb, finite_diff_grad(lambda n: bellman_loss(with_net(n), target, batch, nxt)[0],
                                                  critic.net)) < 1e-4


def test_value_branch_has_no_policy_gradient():
    critic, _, batch, _, pi = make(3, v_mu_shift=50.0)
    _, g = cal_reg(critic, batch, pi)
    _, g2 = cal_reg(critic, batch, np.random.default_rng(9).uniform(-1, 1, pi.shape))
    assert g.equals(g2)


def test_soft_update():
    critic, target, *_ = make(4)
    assert soft_update(target, critic, 1.0).net.equals(critic.net)
    assert soft_update(target, critic, 0.0).net.equals(target.net)
    mixed = soft_update(target, critic, 0.25)
    for m, a, b in zip(mixed.net.arrays(), critic.net.arrays(), target.net.arrays()):
        assert np.allclose(m, 0.25 * a + 0.75 * b, rtol=0, atol=1e-15)


def test_config_validation():
    for bad in ({"gamma": 1.0}, {"rho": 1.5}, {"lambda_cal": -1.0}, {"m_policy_samples": 0}):
        with pytest.raises(ConfigError):
            CalQLConfig(**bad)


def test_q_values_broadcasts_and_checks_shapes():
    critic, _, batch, *_ = make(5)
    acts = batch.actions
    q = q_values(critic, batch.obs[0], acts)
    assert q.shape == (len(acts),)
    assert q[1] == pytest.approx(q_oracle(critic.net, batch.obs[0], acts[1]))
    with pytest.raises(ConfigError):
        q_values(critic, np.zeros(3), acts)


def test_mc_returns_rejects_cross_episode_links(toy, toy_episodes):
    ds = build_dataset(toy_episodes, toy, K=10, stride=2)
    assert np.allclose(mc_returns(ds, ds.gamma), ds.mc_return)
    ds.next_index = ds.next_index.copy()
    j = int(np.flatnonzero(ds.episode == 1)[0])
    ds.next_index[0] = j
    with pytest.raises(ConfigError, match="linkage"):
        mc_returns(ds, ds.gamma)


def test_training_logs_and_determinism(toy, toy_episodes, toy_policy):
    ds = build_dataset(toy_episodes, toy, K=10, stride=2)
    cfg = CalQLConfig(hidden=(16,), steps=30, log_interval=10)
    a = train_critic(ds, toy_policy, cfg, seed=3)
    b = train_critic(ds, toy_policy, cfg, seed=3)
    assert a.critic.net.equals(b.critic.net) and a.target.net.equals(b.target.net)
    assert [r["step"] for r in a.log] == [10, 20, 30]
    assert all(np.isfinite(r["bellman_loss"]) for r in a.log)


def test_training_rejects_mismatched_policy(toy, toy_episodes, toy_policy):
    ds = build_dataset(toy_episodes, toy, K=5)
    with pytest.raises(ConfigError):
        train_critic(ds, toy_policy, CalQLConfig(hidden=(4,), steps=1), seed=0)


def test_checkpoint_round_trip(tmp_path, toy_critic):
    save_critic(toy_critic, tmp_path / "c.json", TargetNet.of(toy_critic), training_tasks=["b", "a"])
    back = load_critic(tmp_path / "c.json")
    assert back.net.equals(toy_critic.net) and back.layout == toy_critic.layout
    assert critic_meta(tmp_path / "c.json")["training_tasks"] == ["a", "b"]
    assert (tmp_path / "c.json.target").exists()


# -- worked examples ---------------------------------------------------------------

def const_critic(q, obs_dim=2, K=1, weight_on_first=0.0):
    from elegance.critic import CriticNet
    from elegance.numerics import MlpParams
    w = np.zeros((1, obs_dim + 4 * K))
    w[0, obs_dim] = weight_on_first
    return CriticNet(MlpParams([(w, np.array([float(q)]))]), obs_dim, K, 4, gamma=0.98, lambda_cal=5.0)


def one_row(reward=1.0, done=False, v_mu=0.0, a0=0.0):
    act = np.zeros((1, 4))
    act[0, 0] = a0
    return CriticBatch(np.zeros((1, 2)), act, np.array([reward]), np.zeros((1, 2)), np.array([done]),
                       np.array([v_mu]))


def test_bellman_worked_example():
    # r = 1, gamma = 0.98, backup max 0.5, Q = 1.2 -> residual -0.29, loss 0.0841
    online, target = const_critic(1.2), TargetNet.of(const_critic(0.5))
    loss, _ = bellman_loss(online, target, one_row(), np.zeros((1, 3, 4)))
    assert loss == pytest.approx(0.0841, abs=1e-12)
    y = backup_targets(target, one_row(done=True), np.zeros((1, 3, 4)), 0.98)
    assert y[0] == 1.0


def test_single_candidate_backup_is_that_candidate():
    critic, target, batch, nxt, _ = make(6, with_next=False)
    one = nxt[:, :1, :]
    y = backup_targets(target, batch, one, 0.9)
    for i in range(len(y)):
        want = batch.rewards[i] + (0.0 if batch.done[i] else 0.9 * q_oracle(target.net, batch.next_obs[i], one[i, 0]))
        assert y[i] == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("e_pi, v_mu, want", [(1.0, 2.0, 0.5), (3.0, 2.0, 1.5)])
def test_regulariser_worked_examples(e_pi, v_mu, want):
    # Q(s, A) = A[0]; policy chunks carry e_pi, the dataset chunk 1.5
    critic = const_critic(0.0, weight_on_first=1.0)
    pi = np.zeros((1, 2, 4))
    pi[0, :, 0] = [e_pi - 0.5, e_pi + 0.5]
    val, _ = cal_reg(critic, one_row(v_mu=v_mu, a0=1.5), pi)
    assert val == pytest.approx(want, abs=1e-12)


def test_zero_weight_critic_returns_bias():
    assert q_values(const_critic(0.3), np.zeros(2), np.ones(4))[0] == 0.3


def test_value_examples():
    from elegance.demos import chained_returns
    assert list(chained_returns([1, 0, 0], [1, 2, -1], 0.98)) == [1.0, 0.0, 0.0]
    assert chained_returns([0, 0, 1], [1, 2, -1], 0.98)[0] == pytest.approx(0.9604)


def test_soft_update_geometric_rate():
    critic, target, *_ = make(7)
    t0 = target
    for _ in range(50):
        target = soft_update(target, critic, 0.05)
    for t, p, z in zip(target.net.arrays(), critic.net.arrays(), t0.net.arrays()):
        assert np.allclose(t, p + 0.95 ** 50 * (z - p), rtol=0, atol=1e-12)
    one = soft_update(TargetNet(const_critic(0.0).net), const_critic(1.0), 5e-3)
    assert one.net.layers[0][1][0] == pytest.approx(0.005)


class Singleton:
    """One terminal transition with reward 1, repeated."""
    obs = np.zeros((8, 2))
    actions = np.full((8, 4), 0.3)
    rewards = np.ones(8)
    mc_return = np.ones(8)
    next_obs = np.zeros((8, 2))
    done = np.ones(8, dtype=bool)
    episode = np.arange(8)
    next_index = -np.ones(8, dtype=np.int64)
    gamma = 0.98


def test_terminal_singleton_fixed_point():
    from elegance.policy import FlowConfig, init_policy
    pol = init_policy(2, 1, FlowConfig(hidden=(4,)), seed=0)
    res = train_critic(Singleton, pol, CalQLConfig(hidden=(16,), lambda_cal=0.0, steps=600, lr=3e-3, batch_size=8),
                       seed=0)
    assert q_values(res.critic, Singleton.obs[:1], Singleton.actions[:1])[0] == pytest.approx(1.0, abs=0.05)


def test_zero_steps_returns_initialisation():
    from elegance.policy import FlowConfig, init_policy
    pol = init_policy(2, 1, FlowConfig(hidden=(4,)), seed=0)
    init = init_critic(2, 1, CalQLConfig(hidden=(5,)), seed=1)
    res = train_critic(Singleton, pol, CalQLConfig(hidden=(5,), steps=0), seed=0, init=init)
    assert res.critic.net.equals(init.net) and res.target.net.equals(init.net)


def test_toy_critic_prefers_dataset_chunks(toy, toy_episodes, toy_policy):
    ds = build_dataset(toy_episodes, toy, K=10, stride=2)
    c = train_critic(ds, toy_policy, CalQLConfig(hidden=(64, 64), steps=300, log_interval=100), seed=0).critic
    rand = np.random.default_rng(0).uniform(-1, 1, ds.actions.shape)
    assert q_values(c, ds.obs, ds.actions).mean() >= q_values(c, ds.obs, rand).mean() + 0.05
