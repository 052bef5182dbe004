import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aigc_edge_sim.approx import grad_check, mlp_init
from aigc_edge_sim.channel import ChannelParams
from aigc_edge_sim.genmodel import build_demo_dataset, expert_policy, make_demo_prompts, make_prompt
from aigc_edge_sim.imitation import (
    PROB_CLAMP,
    IrlConfig,
    advantage,
    baseline_replay_utility,
    disc_prob,
    discriminator_grads,
    discriminator_loss,
    empirical_policy,
    encode_state,
    evaluate_policy,
    gail_reward,
    ppo_clip_loss,
    ppo_clip_ratio_grad,
    standardize,
    state_dim,
    train_irl,
    untrained_policy,
)


def test_state_layout():
    p = make_prompt(0, 2, 0.5)
    s = encode_state(p, 1.5, 3.0)
    assert s.shape == (state_dim(8, 3, 7),)
    assert np.all(s[:21] == 0.0)
    np.testing.assert_array_equal(s[21:29], p.embedding)
    assert s[-1] == pytest.approx(0.5)


def test_untrained_policy_is_uniform():
    pol = untrained_policy(8, 3.0, IrlConfig())
    probs = pol.probs(np.random.default_rng(0).normal(size=(5, state_dim(8, 3, 7))))
    np.testing.assert_allclose(probs, 1.0 / 7)


def test_ppo_clip_examples():
    assert ppo_clip_loss(np.array([1.5]), np.array([1.0]), 0.2) == pytest.approx(1.2)
    assert ppo_clip_loss(np.array([0.5]), np.array([-1.0]), 0.2) == pytest.approx(-0.8)
    assert ppo_clip_loss(np.array([1.0]), np.array([2.0]), 0.2) == pytest.approx(2.0)


@given(st.floats(0.2, 3.0), st.floats(-3.0, 3.0))
def test_ppo_ratio_gradient_matches_fd(r, a):
    if abs(r - 0.8) < 1e-3 or abs(r - 1.2) < 1e-3:
        return
    g = ppo_clip_ratio_grad(np.array([r]), np.array([a]), 0.2)[0]
    h = 1e-6
    fd = (ppo_clip_loss(np.array([r + h]), np.array([a]), 0.2)
          - ppo_clip_loss(np.array([r - h]), np.array([a]), 0.2)) / (2 * h)
    assert g == pytest.approx(fd, abs=1e-6)


def test_advantage_and_standardize():
    np.testing.assert_allclose(advantage(np.array([1.0]), 0.9, np.array([0.5]), np.array([2.0])), [2.3])
    z = standardize(np.array([1.0, 2.0, 3.0, 4.0]))
    assert z.mean() == pytest.approx(0.0, abs=1e-12)
    assert z.std() == pytest.approx(1.0, rel=1e-6)


def test_reward_is_finite_at_extreme_discriminator():
    disc = mlp_init([state_dim(8, 3, 7) + 7, 4, 1], "tanh", 0)
    disc.biases[-1][:] = 1e4
    s = np.zeros((2, state_dim(8, 3, 7)))
    r = gail_reward(disc, s, np.array([0, 1]))
    assert np.all(np.isfinite(r))
    assert r[0] == pytest.approx(-np.log(PROB_CLAMP))
    assert np.all(disc_prob(disc, s, np.array([0, 1])) == 1.0)


def test_discriminator_gradient():
    rng = np.random.default_rng(0)
    sd = state_dim(8, 3, 7)
    disc = mlp_init([sd + 7, 6, 1], "tanh", 1)
    e = (rng.normal(size=(4, sd)), rng.integers(0, 7, 4))
    p = (rng.normal(size=(4, sd)), rng.integers(0, 7, 4))
    assert grad_check(lambda d: discriminator_grads(d, e, p), disc) < 1e-5
    assert discriminator_grads(disc, e, p)[0] == pytest.approx(discriminator_loss(disc, e, p))


@pytest.fixture(scope="module")
def small_run(catalog):
    rng = np.random.default_rng(0)
    prompts = make_demo_prompts(20, catalog, rng)
    ds = build_demo_dataset(prompts, catalog, [0.15, 0.6, 1.2, 2.0, 3.0], ChannelParams(), rng)
    ex = expert_policy(ds)
    res = train_irl(ds, ex, IrlConfig(epochs=200), np.random.default_rng(1), p_total=3.0)
    return ds, ex, res


def test_training_improves_match(small_run):
    _, _, res = small_run
    assert res.curve[0]["expert_match_rate"] == pytest.approx(1 / 7, abs=0.02)
    assert res.curve[-1]["expert_match_rate"] > 0.5


def test_training_is_deterministic(small_run, catalog):
    ds, ex, res = small_run
    again = train_irl(ds, ex, IrlConfig(epochs=200), np.random.default_rng(1), p_total=3.0)
    assert again.policy.net.checksum() == res.policy.net.checksum()


def test_baseline_utilities_ordered(small_run):
    ds, ex, _ = small_run
    u = {w: baseline_replay_utility(ds, ex, w) for w in ("default", "random", "empirical", "expert")}
    assert u["expert"] >= u["empirical"] > u["random"] > u["default"]


def test_evaluate_policy_histogram(catalog, rng):
    prompts = make_demo_prompts(6, catalog, rng)
    ev = evaluate_policy(empirical_policy(), prompts, catalog, ChannelParams(), 200, rng)
    assert ev.histogram.sum() == 200
    assert ev.histogram[6] == 200
