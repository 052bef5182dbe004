import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aigc_edge_sim.channel import ChannelParams
from aigc_edge_sim.errors import InvalidArgument, NotFound
from aigc_edge_sim.genmodel import (
    EMPIRICAL_BEST,
    DemoDataset,
    PromptSpec,
    StrategyCatalog,
    best_expected_strategy,
    build_demo_dataset,
    count_optimized_prompts,
    embed_prompt,
    enumerate_optimized_prompts,
    expert_policy,
    load_catalog,
    make_demo_prompts,
    make_prompt,
    raw_quality,
    user_side_score,
)


@pytest.mark.parametrize("L,expected", [(0, 1), (1, 2), (2, 5), (3, 16), (6, 1957)])
def test_prompt_counts(L, expected):
    assert count_optimized_prompts(L) == expected
    assert sum(1 for _ in enumerate_optimized_prompts(L)) == expected


@given(st.integers(0, 6))
def test_count_matches_brute_force(L):
    brute = sum(1 for k in range(L + 1) for _ in itertools.permutations(range(L), k))
    assert count_optimized_prompts(L) == brute


def test_count_rejects_negative():
    with pytest.raises(InvalidArgument):
        count_optimized_prompts(-1)


def test_catalog_shape(catalog):
    assert catalog.n_strategies == 7
    assert catalog.mean.shape == (catalog.n_classes, 7)
    assert np.all(catalog.std > 0)


def test_catalog_round_trip(catalog, tmp_path):
    path = tmp_path / "cat.json"
    path.write_text(json.dumps(catalog.to_dict()))
    back = load_catalog(path)
    np.testing.assert_array_equal(back.mean, catalog.mean)


def test_catalog_rejects_unknown_keys(catalog):
    doc = catalog.to_dict()
    doc["extra"] = 1
    with pytest.raises(InvalidArgument):
        StrategyCatalog.from_dict(doc)


def test_embedding_is_deterministic_and_carries_complexity():
    a = embed_prompt(2, 0.4, seed=5)
    np.testing.assert_array_equal(a, embed_prompt(2, 0.4, seed=5))
    assert a[-1] == 0.4
    assert np.linalg.norm(a[:-1]) == pytest.approx(1.0)


def test_prompt_spec_round_trip():
    p = make_prompt(3, 1, 0.5, 7.5)
    assert PromptSpec.from_dict(p.to_dict()).to_dict() == p.to_dict()


def test_raw_quality_within_scale(catalog, rng):
    p = make_prompt(0, 0, 0.5)
    q = raw_quality(catalog, p, 6, rng, size=10_000)
    assert q.min() >= 0.0 and q.max() <= 10.0
    assert q.mean() == pytest.approx(catalog.mean[0, 6], abs=0.03)


def test_user_score_degradation():
    assert user_side_score(8.0, 0.0, 0.7, 4.0) == 8.0
    assert user_side_score(8.0, 0.5, 1.0, 4.0) == 0.0
    assert user_side_score(8.0, 0.1, 0.5, 4.0) == pytest.approx(8.0 * 0.8)


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.floats(0.0, 1.0))
def test_score_monotone_in_ber(b1, b2, c):
    lo, hi = sorted((b1, b2))
    assert user_side_score(7.0, hi, c, 4.0) <= user_side_score(7.0, lo, c, 4.0)


def test_best_strategy_changes_with_ber(catalog):
    p = make_prompt(0, 0, 0.8)
    assert best_expected_strategy(catalog, p, 0.0, 4.0) == EMPIRICAL_BEST
    assert best_expected_strategy(catalog, p, 0.15, 4.0) != EMPIRICAL_BEST


def demo(catalog, seed=0):
    rng = np.random.default_rng(seed)
    prompts = make_demo_prompts(20, catalog, rng)
    return build_demo_dataset(prompts, catalog, [0.15, 0.6, 1.2, 2.0, 3.0], ChannelParams(), rng)


def test_demo_dataset_is_complete(catalog):
    ds = demo(catalog)
    assert len(ds.records) == 20 * 7 * 5
    assert not np.any(np.isnan(ds.score_table()))


def test_demo_dataset_round_trip(catalog, tmp_path):
    ds = demo(catalog)
    ds.write(tmp_path / "d.ndjson")
    back = DemoDataset.read(tmp_path / "d.ndjson")
    np.testing.assert_array_equal(back.score_table(), ds.score_table())


def test_expert_is_argmax_with_low_id_ties(catalog):
    ds = demo(catalog)
    ex = expert_policy(ds)
    table = ds.score_table()
    for i, p in enumerate(ds.prompts):
        for j, pw in enumerate(ds.power_grid):
            k = ex.lookup(p.id, pw)
            assert table[i, j, k] == table[i, j].max()
            assert k == int(np.flatnonzero(table[i, j] == table[i, j].max())[0])


def test_expert_prefers_best_strategy_mostly_but_not_always(catalog):
    choice = expert_policy(demo(catalog)).choice
    frac = np.mean(choice == EMPIRICAL_BEST)
    assert 0.3 < frac < 0.95


def test_expert_lookup_unknown_prompt(catalog):
    with pytest.raises(NotFound):
        expert_policy(demo(catalog)).lookup(999, 1.0)


def test_demo_grid_must_fit_budget(catalog, rng):
    with pytest.raises(InvalidArgument):
        build_demo_dataset(make_demo_prompts(2, catalog, rng), catalog, [5.0], ChannelParams(), rng)
