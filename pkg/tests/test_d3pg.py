import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from aigc_edge_sim.approx import (
    grad_check,
    mlp_backward,
    mlp_forward_cache,
    mlp_init,
    optimizer_init,
    optimizer_step,
)
from aigc_edge_sim.channel import ChannelParams
from aigc_edge_sim.d3pg import (
    D3pgConfig,
    DiffusionActor,
    Diverged,
    GaussianActor,
    ReplayBuffer,
    actor_loss,
    complexity_report,
    critic_target,
    decode_action,
    denoise_action,
    diffusion_bc_loss,
    forward_diffuse,
    make_schedule,
    train_d3pg,
)
from aigc_edge_sim.errors import InvalidArgument
from aigc_edge_sim.provision import QoEConfig, ServiceEnv, make_state


def test_schedule_no_noise_override():
    s = make_schedule(4, betas=np.zeros(4))
    np.testing.assert_array_equal(s.alpha, 1.0)
    assert s.alpha_bar[-1] == 1.0


def test_schedule_golden_values():
    assert make_schedule(5, 1e-4, 0.02).alpha_bar[-1] == pytest.approx(0.9506298682387098, rel=1e-14)
    assert make_schedule(5).alpha_bar[-1] == pytest.approx(0.1512, rel=1e-14)


@given(st.integers(1, 20), st.floats(1e-4, 0.5), st.floats(0.0, 0.49))
def test_schedule_monotone(T, lo, extra):
    s = make_schedule(T, lo, lo + extra)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.alpha) <= 0)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(s.alpha))


def test_schedule_rejects_bad_range():
    with pytest.raises(InvalidArgument):
        make_schedule(5, 0.2, 0.1)
    with pytest.raises(InvalidArgument):
        make_schedule(5, 0.0, 0.1)
    with pytest.raises(InvalidArgument):
        make_schedule(0)


def test_forward_noiseless_is_identity(rng):
    s = make_schedule(3, betas=np.zeros(3))
    a0 = np.array([0.3, -0.7])
    np.testing.assert_array_equal(forward_diffuse(a0, 3, s, rng), a0)


def test_forward_variance(rng):
    s = make_schedule(1, betas=[0.25])
    x = forward_diffuse(np.zeros(100_000), 1, s, rng)
    assert x.std() == pytest.approx(0.5, rel=0.01)
    assert x.var() == pytest.approx(1 - s.alpha_bar[0], rel=0.02)


def test_forward_limit_is_standard_normal(rng):
    s = make_schedule(3, betas=[0.99, 0.99, 0.99])
    x = forward_diffuse(np.full(20_000, 0.8), 3, s, rng)
    assert stats.kstest(x, "norm").pvalue > 0.01


def actor_for(state_dim, q, T=5, seed=0, schedule=None):
    return DiffusionActor.create(state_dim, 2 * q, schedule or make_schedule(T), (16, 16), 8, seed)


def test_identity_chain_returns_initial_noise(rng):
    actor = actor_for(3, 1, schedule=make_schedule(3, betas=np.zeros(3)))
    actor.net = mlp_init(actor.net.layer_sizes, "tanh", zero=True)
    a_T = np.array([[0.4, -0.9]])
    np.testing.assert_array_equal(denoise_action(np.zeros((1, 3)), actor, rng, a_T=a_T), a_T)


def test_denoise_deterministic_per_seed():
    actor = actor_for(4, 2)
    s = np.ones(4)
    a = denoise_action(s, actor, np.random.default_rng(5))
    b = denoise_action(s, actor, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)


def test_behavior_cloning_reproduces_targets():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(4, 3))
    targets = rng.uniform(-0.8, 0.8, size=(4, 2))
    actor = DiffusionActor.create(3, 2, make_schedule(5), (64, 64), 8, seed=1)
    opt = optimizer_init(actor.net, 3e-3)
    for _ in range(4000):
        idx = rng.integers(0, 4, 64)
        _, grads = diffusion_bc_loss(actor, states[idx], targets[idx], rng)
        actor.net, opt = optimizer_step(actor.net, grads, opt)
    idx = np.repeat(np.arange(4), 50)
    out = denoise_action(states[idx], actor, rng)
    assert np.mean((out - targets[idx]) ** 2) < 1e-2


def test_decode_symmetric_zero():
    a = decode_action(np.zeros(6), 3, 5, 3.0)
    assert a.n.tolist() == [3, 3, 3]
    np.testing.assert_allclose(a.p, [1.0, 1.0, 1.0])


def test_decode_endpoints():
    a = decode_action(np.array([-1.0, 1.0, 0.0, 0.0]), 2, 5, 2.0)
    assert a.n.tolist() == [1, 5]


def test_decode_softmax_powers():
    a = decode_action(np.array([0, 0, 0, 1.0, 0, 0]), 3, 5, 3.0)
    np.testing.assert_allclose(a.p, [1.7283506542974873, 0.6358246728512563, 0.6358246728512563], rtol=1e-14)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8).filter(lambda v: len(v) % 2 == 0),
       st.integers(1, 8), st.floats(0.1, 50))
def test_decode_always_feasible(raw, n_max, p_total):
    q = len(raw) // 2
    a = decode_action(np.array(raw), q, n_max, p_total)
    assert np.all((a.n >= 1) & (a.n <= n_max))
    assert np.all(a.p > 0)
    assert math.fsum(a.p) <= p_total


def const_critic(in_dim, value):
    c = mlp_init([in_dim, 4, 1], "tanh", zero=True)
    c.biases[-1][:] = value
    return c


def test_critic_target_examples():
    assert critic_target(5.0, 0.99, terminal=True)[0] == 5.0
    assert critic_target(3.0, 0.0, terminal=False)[0] == 3.0
    actor = GaussianActor.create(2, 2, (4,), seed=0)
    crit = [const_critic(4, 2.0), const_critic(4, 2.5)]
    y = critic_target([1.0], 0.9, np.zeros((1, 2)), [False], lambda s: actor(s, None), crit)
    assert y[0] == pytest.approx(2.8)


def test_actor_loss_constant_critic():
    actor = actor_for(3, 1)
    crit = const_critic(5, 1.7)
    a_T = np.random.default_rng(0).normal(size=(8, 2)) * 0.1
    loss, grads = actor_loss(crit, np.zeros((8, 3)), actor, a_T)
    assert loss == pytest.approx(-1.7)
    assert all(np.all(g == 0) for g in grads)


def test_actor_gradient_through_chain():
    rng = np.random.default_rng(0)
    actor = DiffusionActor.create(2, 2, make_schedule(3), (8, 8), 4, seed=2)
    critic = mlp_init([4, 8, 1], "tanh", seed=3)
    s = rng.normal(size=(6, 2))
    a_T = rng.normal(size=(6, 2))

    def fn(net):
        actor.net = net
        return actor_loss(critic, s, actor, a_T, bound_penalty=5.0)

    assert grad_check(fn, actor.net.copy()) < 1e-3


def test_actor_converges_on_quadratic_critic():
    rng = np.random.default_rng(0)
    target = np.array([0.4, -0.3])
    xs = rng.uniform(-1, 1, size=(4000, 2))
    ys = -np.sum((xs - target) ** 2, axis=1)
    critic = mlp_init([3, 32, 32, 1], "tanh", seed=0)
    copt = optimizer_init(critic, 3e-3)
    inp = np.hstack([np.zeros((4000, 1)), xs])
    for _ in range(3000):
        idx = rng.integers(0, 4000, 128)
        v, cache = mlp_forward_cache(critic, inp[idx])
        g, _ = mlp_backward(critic, cache, 2 * (v - ys[idx, None]) / 128)
        critic, copt = optimizer_step(critic, g, copt)
    actor = DiffusionActor.create(1, 2, make_schedule(5), (32, 32), 8, seed=0)
    aopt = optimizer_init(actor.net, 3e-3)
    s = np.zeros((64, 1))
    for _ in range(1500):
        _, grads = actor_loss(critic, s, actor, rng.normal(size=(64, 2)), bound_penalty=20.0)
        actor.net, aopt = optimizer_step(actor.net, grads, aopt)
    out = denoise_action(np.zeros((200, 1)), actor, rng)
    assert np.mean(np.sum((out - target) ** 2, axis=1)) < 1e-2


def test_replay_sampling_uniform(rng):
    buf = ReplayBuffer(100, 1, 1)
    for i in range(100):
        buf.add([i], [0.0], float(i), [i])
    counts = np.bincount(buf.sample_indices(rng, 100_000), minlength=100)
    rel = np.abs(counts / 1000.0 - 1.0)
    assert rel.mean() < 0.05
    assert stats.chisquare(counts).pvalue > 0.01


def test_replay_ring_overwrites():
    buf = ReplayBuffer(3, 1, 1)
    for i in range(5):
        buf.add([i], [0.0], float(i), [i])
    assert len(buf) == 3
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]


def test_complexity_scales_with_T():
    r5 = complexity_report(D3pgConfig(T=5), 30, 6)
    r10 = complexity_report(D3pgConfig(T=10), 30, 6)
    assert 1.9 <= r10["actor_macs_per_action"] / r5["actor_macs_per_action"] <= 2.1
    r1 = complexity_report(D3pgConfig(T=1), 30, 6)
    actor = DiffusionActor.create(30, 6, make_schedule(1), (64, 64), 8)
    assert r1["actor_macs_per_action"] == actor.net.macs_per_sample()
    big = complexity_report(D3pgConfig(T=5), 30, 6, critic_hidden=[256, 256])
    assert big["actor_macs_per_action"] == r5["actor_macs_per_action"]
    assert big["S_q"] > r5["S_q"]


def test_config_validation():
    with pytest.raises(InvalidArgument):
        D3pgConfig(T=0)
    with pytest.raises(InvalidArgument):
        D3pgConfig(tau=0.0)
    with pytest.raises(InvalidArgument):
        D3pgConfig(actor_kind="sac")


def toy_env(catalog):
    users = [dict(class_id=0, complexity=0.3, distance=10.0, threshold=6.5)]
    return ServiceEnv(make_state(users, ChannelParams()), catalog, ChannelParams(), QoEConfig())


@pytest.mark.parametrize("std", [0.0, 0.1])
def test_training_reproducible(catalog, std):
    cfg = D3pgConfig(episodes=120, warmup=16, batch_size=16, explore_std=std, explore_final=std)
    a = train_d3pg(toy_env(catalog), cfg, np.random.default_rng(3))
    b = train_d3pg(toy_env(catalog), cfg, np.random.default_rng(3))
    assert a.actor.net.checksum() == b.actor.net.checksum()
    assert [r["reward"] for r in a.curve] == [r["reward"] for r in b.curve]


def test_divergence_reports_snapshot(catalog, monkeypatch):
    env = toy_env(catalog)
    monkeypatch.setattr(env, "step", lambda a, rng: (float("nan"), {"qoe_sum": 0.0, "cost_sum": 0.0,
                                                                   "constraint_violations": 0}))
    with pytest.raises(Diverged) as e:
        train_d3pg(env, D3pgConfig(episodes=50, warmup=4, batch_size=4), np.random.default_rng(0))
    assert e.value.snapshot is not None
