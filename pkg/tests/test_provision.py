import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aigc_edge_sim.channel import ChannelParams
from aigc_edge_sim.errors import InvalidArgument
from aigc_edge_sim.genmodel import StrategyCatalog, load_catalog
from aigc_edge_sim.provision import (
    ConstraintViolation,
    ProvisionAction,
    ProvisionState,
    QoEConfig,
    ServiceEnv,
    brute_force_oracle,
    cost,
    latency_factor,
    make_state,
    power_compositions,
    qoe,
    random_baseline,
    reward,
    static_baseline,
)

CFG = QoEConfig()


def test_qoe_two_trials():
    cfg = QoEConfig(l_max=8.0, t_zeta=1.0)
    assert qoe(2, [8.0, 8.4], 8.0, cfg) == pytest.approx(0.09758032833886400, rel=1e-12)


def test_qoe_zero_at_threshold():
    assert qoe(3, [7.0, 8.0], 8.0, CFG) == 0.0


def test_qoe_single_trial_natural_log():
    cfg = QoEConfig(l_max=math.e, t_zeta=1.0)
    assert qoe(1, [8.0 * math.e], 8.0, cfg) == pytest.approx(1.0)
    assert latency_factor(1, CFG) == pytest.approx(math.log(10.0))


def test_qoe_violations():
    with pytest.raises(ConstraintViolation) as e:
        qoe(11, [9.0], 8.0, CFG)
    assert e.value.kind == "latency"
    with pytest.raises(ConstraintViolation) as e:
        qoe(2, [7.0, 7.9], 8.0, CFG)
    assert e.value.kind == "quality"


@given(st.integers(1, 9), st.floats(8.01, 10.0), st.floats(0.001, 0.5))
def test_qoe_increasing_in_best_quality(n, q, dq):
    lo = qoe(n, [q - dq], 8.0, CFG) if q - dq >= 8.0 else None
    hi = qoe(n, [q], 8.0, CFG)
    if lo is not None:
        assert hi > lo


def test_cost_examples():
    assert cost(2, 0.5, 1.0) == 3.0
    assert cost(3, 0.0, 0.25) == 0.75
    assert cost(4, 0.7, 0.25) == pytest.approx(2 * cost(2, 0.7, 0.25))
    with pytest.raises(InvalidArgument):
        cost(0, 1.0, 1.0)


def three_users(thresholds=(8.0, 7.0, 7.5), classes=(0, 1, 2)):
    users = [dict(class_id=c, complexity=0.3, distance=10.0, threshold=t) for c, t in zip(classes, thresholds)]
    return make_state(users, ChannelParams())


def test_reward_over_budget():
    st_ = three_users()
    a = ProvisionAction([1, 1, 1], [1.01, 1.0, 1.02])
    assert reward(st_, a, [[9.0]] * 3, CFG) == -15.0


def test_reward_one_violator_hand_evaluated():
    st_ = three_users()
    a = ProvisionAction([2, 1, 3], [1.0, 0.5, 1.5])
    r = reward(st_, a, [[8.0, 8.4], [6.0], [7.0, 9.0, 8.0]], CFG)
    assert r == pytest.approx(-5.461905955996796, abs=1e-12)


def test_reward_quality_only_weights():
    st_ = three_users()
    cfg = QoEConfig(eta_c=0.0)
    a = ProvisionAction([1, 1, 1], [1.0, 1.0, 1.0])
    quals = [[9.0], [8.0], [8.0]]
    expected = sum(qoe(1, q, t, cfg) for q, t in zip(quals, st_.thresholds))
    assert reward(st_, a, quals, cfg) == pytest.approx(expected)


@given(st.permutations([0, 1, 2]), st.lists(st.floats(6.0, 10.0), min_size=3, max_size=3),
       st.lists(st.integers(1, 5), min_size=3, max_size=3))
def test_reward_permutation_invariant(order, quals, ns):
    st_ = three_users()
    a = ProvisionAction(ns, [0.5, 1.0, 1.5])
    q = [[x] for x in quals]
    base = reward(st_, a, q, CFG)
    perm = reward(st_.permuted(order), a.permuted(order), [q[i] for i in order], CFG)
    assert perm == base


def test_state_validation():
    ch = ChannelParams()
    with pytest.raises(InvalidArgument):
        make_state([dict(class_id=0, complexity=0.3, distance=0.0, threshold=8.0)], ch)
    with pytest.raises(InvalidArgument):
        make_state([dict(class_id=0, complexity=0.3, distance=1.0, threshold=11.0)], ch)


def test_state_encoding_reference_snr():
    st_ = three_users()
    assert st_.snr_ref == pytest.approx(3.0 / 1e-3)
    assert st_.encode().size == 3 * 8 + 3 + 3 + 2


def deterministic_catalog():
    cat = load_catalog()
    return StrategyCatalog(cat.strategies, cat.classes, cat.mean, np.zeros_like(cat.mean), cat.sensitivity)


def test_env_closed_form_single_trials():
    cat = deterministic_catalog()
    ch = ChannelParams(n0=1e-30, sigma_s=0.0)
    st_ = three_users(thresholds=(8.0, 8.0, 8.0))
    env = ServiceEnv(st_, cat, ch, CFG, exact_ber=True)
    a = ProvisionAction([1, 1, 1], [1.0, 1.0, 1.0])
    r, info = env.step(a, np.random.default_rng(0))
    ln10 = math.log(10.0)
    expected = sum(ln10 * math.log(cat.mean[c, 6] / 8.0) - 0.1 * 1.25 for c in (0, 1, 2))
    assert info["strategies"] == [6, 6, 6]
    assert r == pytest.approx(expected, abs=1e-9)


def test_env_zero_power_user_is_penalized(catalog):
    users = [dict(class_id=0, complexity=1.0, distance=10.0, threshold=7.0)]
    env = ServiceEnv(make_state(users, ChannelParams()), catalog, ChannelParams(), QoEConfig(kappa=8.0),
                     strategy_fn=lambda p, pw: 0)
    r, info = env.step(ProvisionAction([3], [0.0]), np.random.default_rng(0))
    assert info["ber"][0] == 0.5
    assert r == -5.0


def test_env_step_deterministic(catalog):
    env = ServiceEnv(three_users(), catalog, ChannelParams(), CFG)
    a = ProvisionAction([2, 3, 4], [1.0, 1.0, 1.0])
    assert env.step(a, np.random.default_rng(7))[0] == env.step(a, np.random.default_rng(7))[0]


def test_expected_reward_matches_sampling(catalog):
    env = ServiceEnv(three_users(), catalog, ChannelParams(), CFG)
    a = ProvisionAction([2, 4, 5], [0.8, 1.0, 1.2])
    rng = np.random.default_rng(3)
    samples = [env.step(a, rng)[0] for _ in range(20_000)]
    se = np.std(samples) / math.sqrt(len(samples))
    assert env.expected_reward(a) == pytest.approx(np.mean(samples), abs=4 * se)


def test_table_ber_close_to_exact(catalog):
    st_ = three_users()
    fast = ServiceEnv(st_, catalog, ChannelParams(), CFG)
    exact = ServiceEnv(st_, catalog, ChannelParams(), CFG, exact_ber=True)
    for p in [0.05, 0.37, 1.0, 2.2]:
        assert fast.ber(0, p) == pytest.approx(exact.ber(0, p), abs=1e-4)


def test_compositions():
    comps = list(power_compositions(3, 6))
    assert len(comps) == math.comb(5, 2)
    assert comps == sorted(comps)
    assert all(sum(c) == 6 and min(c) >= 1 for c in comps)


def test_oracle_single_feasible_trial_count(catalog):
    cfg = QoEConfig(l_max=1.5, t_zeta=1.0)
    st_ = make_state([dict(class_id=0, complexity=0.3, distance=10.0, threshold=6.5)], ChannelParams())
    res = brute_force_oracle(ServiceEnv(st_, catalog, ChannelParams(), cfg))
    assert res.action.n.tolist() == [1]


def test_oracle_symmetric_users_get_uniform_power(catalog):
    users = [dict(class_id=1, complexity=0.3, distance=10.0, threshold=7.8)] * 3
    res = brute_force_oracle(ServiceEnv(make_state(users, ChannelParams()), catalog, ChannelParams(), CFG))
    np.testing.assert_allclose(res.action.p, [1.0, 1.0, 1.0])
    assert len(set(res.action.n.tolist())) == 1


def test_oracle_is_exhaustive(catalog):
    env = ServiceEnv(three_users(), catalog, ChannelParams(), QoEConfig(n_max=3))
    res = brute_force_oracle(env, quanta=6)
    best = max(env.expected_reward(ProvisionAction(ns, np.array(ks) * 0.5))
               for ns in itertools.product([1, 2, 3], repeat=3) for ks in power_compositions(3, 6))
    assert res.reward == pytest.approx(best, abs=1e-12)
    assert res.n_evaluated == 27 * 10


def test_oracle_rejects_large_grids(catalog):
    users = [dict(class_id=0, complexity=0.3, distance=10.0, threshold=7.0)] * 5
    env = ServiceEnv(make_state(users, ChannelParams()), catalog, ChannelParams(), CFG)
    with pytest.raises(InvalidArgument):
        brute_force_oracle(env)


def test_static_baseline():
    a = static_baseline(three_users(), CFG)
    assert a.n.tolist() == [4, 4, 4]
    np.testing.assert_allclose(a.p, [1.0, 1.0, 1.0])


@given(st.integers(0, 2**32 - 1))
def test_random_baseline_feasible(seed):
    st_ = three_users()
    a = random_baseline(st_, CFG, np.random.default_rng(seed))
    assert a.feasible(st_.p_total, CFG.n_max)
    assert np.all(a.p > 0)


def test_random_baseline_below_oracle(catalog):
    env = ServiceEnv(three_users(), catalog, ChannelParams(), CFG)
    best = brute_force_oracle(env).reward
    for seed in range(5):
        rng = np.random.default_rng(seed)
        mean = np.mean([env.expected_reward(random_baseline(env.state, CFG, rng)) for _ in range(10)])
        assert mean < best
