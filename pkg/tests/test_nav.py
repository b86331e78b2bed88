import math

import numpy as np
import pytest

from relmm import nav as N
from relmm import world as W
from relmm.grasp import GraspEnsemble
from relmm.nav import NavBuffer, NavPolicy


def obs_batch(n, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, 32, 32)).astype(np.float32)


def filled_buffer(n=40, seed=0, reward=-1.0):
    rng = np.random.default_rng(seed)
    buf = NavBuffer(capacity=100)
    o = obs_batch(n + 1, seed)
    for i in range(n):
        buf.add(o[i], rng.uniform(-1, 1, 2), reward, o[i + 1], False, 0)
    return buf


def test_nav_reward():
    assert N.compute_nav_reward(1) == 0.0
    assert N.compute_nav_reward(0) == -1.0
    r_g = np.array([1, 0, 0, 1, 0, 0, 0])
    assert sum(N.compute_nav_reward(x) for x in r_g) == r_g.sum() - len(r_g)


def test_actions_in_bounds():
    pol = NavPolicy(seed=1)
    rng = np.random.default_rng(0)
    a = pol.act(obs_batch(64), rng)
    assert a.shape == (64, 2) and np.all(np.abs(a) <= 1)
    # squashing is bounded for any pre-activation, including extreme ones
    mean = rng.standard_normal((1_000_000, 2)) * 50
    _, a, logp = pol._sample(mean, np.full_like(mean, 2.0), rng.standard_normal(mean.shape))
    assert np.all(np.abs(a) <= 1) and np.all(np.isfinite(logp))


def test_zero_actor_greedy_is_zero():
    pol = NavPolicy(seed=2)
    for v in pol.actor.params.values():
        v[...] = 0
    np.testing.assert_array_equal(pol.act(obs_batch(1)[0], None, greedy=True), [0.0, 0.0])


def test_stochastic_action_deterministic_under_seed():
    o = obs_batch(1)[0]
    a = NavPolicy(seed=3).act(o, np.random.default_rng(9))
    b = NavPolicy(seed=3).act(o, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_log_prob_matches_change_of_variables():
    pol = NavPolicy(seed=0)
    rng = np.random.default_rng(1)
    mean = rng.standard_normal((5, 2))
    log_std = rng.uniform(-1, 0.5, (5, 2))
    eps = rng.standard_normal((5, 2))
    u, a, logp = pol._sample(mean, log_std, eps)
    std = np.exp(log_std)
    gauss = -0.5 * ((u - mean) / std) ** 2 - np.log(std) - 0.5 * math.log(2 * math.pi)
    ref = np.sum(gauss - np.log(1 - np.tanh(u) ** 2), axis=1)
    np.testing.assert_allclose(logp, ref, rtol=1e-10)


def test_relabel_rewards():
    ens = GraspEnsemble(members=2, seed=0)
    o = obs_batch(3)
    assert N.relabel_reward(ens, o[0], 1) == 0.0
    # constant member outputs 0.04 -> G = 0.4 -> reward -0.6
    for net in ens.members:
        last = max(int(k.split(".")[0]) for k in net.params)
        net.params[f"{last}.weight"][...] = 0
        net.params[f"{last}.bias"][...] = math.log(0.04 / 0.96)
    assert N.relabel_reward(ens, o[1], 0) == pytest.approx(-0.6)
    for net in ens.members:
        net.params[f"{last}.bias"][...] = -30.0
    assert N.relabel_reward(ens, o[2], 0) == pytest.approx(-1.0, abs=1e-6)


def test_relabel_does_not_mutate_buffer():
    buf = filled_buffer()
    before = buf.rewards.copy()
    pol = NavPolicy(seed=0, batch_size=8)
    N.sac_update(pol, buf, np.random.default_rng(0), GraspEnsemble(members=2), relabel=True)
    np.testing.assert_array_equal(buf.rewards, before)


def test_relabelled_rewards_in_range():
    ens = GraspEnsemble(members=2, seed=1)
    o = obs_batch(20)
    r = N.relabel_rewards(ens, o, np.arange(20) % 3 == 0)
    assert np.all((r >= -1) & (r <= 0))


def test_buffer_rejects_bad_reward():
    with pytest.raises(ValueError):
        NavBuffer(capacity=2).add(obs_batch(1)[0], [0, 0], 0.5, obs_batch(1)[0], False, 0)


def test_buffer_fifo_and_quantisation():
    s = W.scatter_objects(W.RoomSpec(), 0)
    o = W.render_nav_obs(s)
    buf = NavBuffer(capacity=2)
    for i in range(3):
        buf.add(o, [i / 10, 0], -1.0, o, False, 0)
    assert len(buf) == 2
    b = buf.batch(np.array([0, 1]))
    np.testing.assert_array_equal(b["obs"][0], o)
    assert sorted(b["actions"][:, 0].round(3)) == [0.1, 0.2]


def test_gamma_zero_temperature_zero_target_is_reward():
    pol = NavPolicy(seed=0, gamma=0.0, init_alpha=0.0, auto_alpha=False)
    r = np.array([-1.0, 0.0, -1.0])
    feats = pol.features(obs_batch(3), target=True)
    np.testing.assert_array_equal(pol.td_target(r, feats, np.random.default_rng(0)), r)


def test_gamma_zero_target_is_reward_plus_nothing_else():
    pol = NavPolicy(seed=0, gamma=0.0)
    r = np.array([-1.0, 0.0])
    feats = pol.features(obs_batch(2), target=True)
    np.testing.assert_allclose(pol.td_target(r, feats, np.random.default_rng(0)), r)


def test_tau_one_copies_critics():
    pol = NavPolicy(seed=0, tau=1.0, batch_size=8)
    N.sac_update(pol, filled_buffer(), np.random.default_rng(0))
    for live, tgt in ((pol.q1, pol.q1_target), (pol.q2, pol.q2_target),
                      (pol.encoder, pol.target_encoder)):
        for k in live.params:
            np.testing.assert_array_equal(live.params[k], tgt.params[k])


def test_target_ema_contract():
    pol = NavPolicy(seed=0, tau=0.005, batch_size=8)
    old = {k: v.copy() for k, v in pol.q1_target.params.items()}
    N.sac_update(pol, filled_buffer(), np.random.default_rng(0))
    for k, v in pol.q1_target.params.items():
        expect = (1 - 0.005) * old[k] + 0.005 * pol.q1.params[k]
        assert np.max(np.abs(v - expect)) <= 1e-7


def test_symmetric_critics_reduce_to_one():
    pol = NavPolicy(seed=0, init_alpha=0.0, auto_alpha=False)
    pol.q2_target.copy_params_from(pol.q1_target)
    feats = pol.features(obs_batch(4), target=True)
    r = np.full(4, -1.0)
    y = pol.td_target(r, feats, np.random.default_rng(0))
    mean, log_std, _ = pol._dist(feats)
    _, a, _ = pol._sample(mean, log_std, np.random.default_rng(0).standard_normal(mean.shape))
    q = pol.q1_target.forward(np.concatenate([feats, a.astype(np.float32)], 1))[:, 0]
    np.testing.assert_allclose(y, r + pol.gamma * q, rtol=1e-6)


def test_losses_finite_and_temperature_moves():
    pol = NavPolicy(seed=0, batch_size=8)
    a0 = pol.alpha
    rng = np.random.default_rng(0)
    buf = filled_buffer()
    for _ in range(5):
        out = N.sac_update(pol, buf, rng)
    assert all(np.isfinite([out.critic1, out.critic2, out.actor, out.temperature]))
    assert pol.alpha != a0


def test_update_needs_full_batch():
    assert N.sac_update(NavPolicy(batch_size=64), filled_buffer(10), np.random.default_rng(0)) is None


def test_actor_gradient_matches_finite_differences():
    pol = NavPolicy(seed=4, init_alpha=0.3)
    net = type(pol.actor)
    pol.actor = net(pol.actor.input_shape, pol.actor.layers, seed=4, dtype=np.float64)
    for name in ("q1", "q2"):
        old = getattr(pol, name)
        new = net(old.input_shape, old.layers, dtype=np.float64)
        new.copy_params_from(old)
        setattr(pol, name, new)
    rng = np.random.default_rng(0)
    feats = pol.features(obs_batch(6)).astype(np.float64)
    eps = rng.standard_normal((6, 2))
    alpha = pol.alpha

    def loss():
        mean, log_std, _ = pol._dist(feats)
        _, a, logp = pol._sample(mean, log_std, eps)
        x = np.concatenate([feats, a], 1)
        q = np.minimum(pol.q1.forward(x, cache=False)[:, 0], pol.q2.forward(x, cache=False)[:, 0])
        return float(np.mean(alpha * logp - q))

    # analytic gradient through the same code path the update uses
    mean, log_std, inside = pol._dist(feats, cache=True)
    u, a, logp = pol._sample(mean, log_std, eps)
    std = np.exp(log_std)
    xa = np.concatenate([feats, a], 1)
    q1v, q2v = pol.q1.forward(xa)[:, 0], pol.q2.forward(xa)[:, 0]
    use1 = q1v <= q2v
    ones = np.ones((6, 1))
    ga1, _ = pol.q1.backward(ones * use1[:, None])
    ga2, _ = pol.q2.backward(ones * (~use1)[:, None])
    dq = (ga1 + ga2)[:, pol.feature_dim:].astype(np.float64)
    d_mean = (alpha * 2 * a - dq * (1 - a ** 2)) / 6
    d_ls = (alpha * (-1 + 2 * a * std * eps) - dq * (1 - a ** 2) * std * eps) / 6 * inside
    _, grads = pol.actor.backward(np.concatenate([d_mean, d_ls], 1))
    worst = 0.0
    for k in ("2.weight", "2.bias", "4.weight"):
        p = pol.actor.params[k].reshape(-1)
        for j in rng.integers(p.size, size=4):
            old = p[j]
            p[j] = old + 1e-5
            fp = loss()
            p[j] = old - 1e-5
            fm = loss()
            p[j] = old
            num = (fp - fm) / 2e-5
            ana = grads[k].reshape(-1)[j]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    assert worst < 1e-4


def test_toy_mdp_geometric_value():
    # one state, reward -1 everywhere; actions cover the square so the actor
    # cannot exploit critic extrapolation outside the data
    gamma = 0.9
    pol = NavPolicy(seed=0, gamma=gamma, tau=0.2, lr=1e-3, batch_size=16,
                    init_alpha=0.0, auto_alpha=False)
    buf = NavBuffer(capacity=64)
    o = np.zeros((3, 32, 32), dtype=np.float32)
    grid = np.linspace(-1, 1, 8)
    for a0 in grid:
        for a1 in grid:
            buf.add(o, [a0, a1], -1.0, o, False, 0)
    rng = np.random.default_rng(0)
    for _ in range(800):
        N.sac_update(pol, buf, rng)
    x = np.concatenate([np.repeat(pol.features(o[None]), 64, 0), buf.actions], 1)
    q = float(pol.q1.forward(x)[:, 0].mean())
    assert q == pytest.approx(-1 / (1 - gamma), rel=0.05)


def test_checkpoint_arrays_round_trip():
    pol = NavPolicy(seed=0, batch_size=8)
    N.sac_update(pol, filled_buffer(), np.random.default_rng(0))
    other = NavPolicy(seed=5, batch_size=8)
    other.load({k: v.copy() for k, v in pol.arrays().items()}, pol.meta())
    o = obs_batch(2)
    np.testing.assert_array_equal(pol.act(o, np.random.default_rng(1)),
                                  other.act(o, np.random.default_rng(1)))
    a = N.sac_update(pol, filled_buffer(seed=2), np.random.default_rng(3))
    b = N.sac_update(other, filled_buffer(seed=2), np.random.default_rng(3))
    assert a == b
