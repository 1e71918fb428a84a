import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surge.metrics import (
    ScoredInstances, auc, evaluate, format_report, gauc, length_breakdown, mrr, ndcg_at_k,
    paired_bootstrap, per_user_auc, positive_ranks, write_report,
)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([1.0, 0.0], [1, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    assert auc([0.1, 0.2], [1, 1]) is None
    assert auc([], []) is None


def test_auc_exact_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(300):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        scores = rng.integers(0, 5, n).astype(float) if trial % 2 else rng.random(n)
        assert auc(scores, labels) == brute_auc(scores.tolist(), labels.tolist())


@settings(max_examples=100, deadline=None)
# grid-valued scores so the transform stays strictly monotone in floating point
@given(st.lists(st.tuples(st.integers(-400, 400).map(lambda k: k / 8), st.booleans()), min_size=2, max_size=60))
def test_auc_invariant_under_monotone_transform(rows):
    scores = np.array([s for s, _ in rows])
    labels = np.array([y for _, y in rows])
    base = auc(scores, labels)
    assert auc(np.exp(scores / 10) * 3 + 1, labels) == base
    assert base == brute_auc(scores.tolist(), labels.tolist())


def test_gauc_examples():
    users = [0, 0, 0, 1, 1]
    scores = [0.9, 0.8, 0.1, 0.5, 0.5]
    labels = [1, 1, 0, 1, 0]
    assert abs(gauc(users, scores, labels) - 5 / 6) <= 1e-9
    assert gauc([7] * 4, [0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0])
    # user 2 has no negatives and is skipped
    assert gauc([0, 0, 2], [0.9, 0.1, 0.5], [1, 0, 1]) == 1.0
    assert gauc([0], [0.5], [1]) is None
    # impressions: weights 3 and 2
    assert gauc(users, scores, labels, weighting="impressions") == pytest.approx((3 * 1.0 + 2 * 0.5) / 5)


def test_gauc_identical_users_equals_auc():
    s = np.array([0.8, 0.4, 0.6, 0.2])
    y = np.array([1, 1, 0, 0])
    assert gauc(np.repeat([0, 1, 2], 4), np.tile(s, 3), np.tile(y, 3)) == auc(s, y)


def test_gauc_within_user_range():
    rng = np.random.default_rng(1)
    for _ in range(100):
        users = rng.integers(0, 6, 50)
        scores, labels = rng.random(50), rng.integers(0, 2, 50)
        per = per_user_auc(users, scores, labels)
        g = gauc(users, scores, labels)
        if per:
            assert min(per.values()) - 1e-12 <= g <= max(per.values()) + 1e-12


def test_mrr_and_ndcg_examples():
    # group 0: positive on top; group 1: positive 4th of 4
    groups = [0, 0, 1, 1, 1, 1]
    scores = [0.9, 0.1, 0.1, 0.5, 0.6, 0.7]
    labels = [1, 0, 1, 0, 0, 0]
    items = [1, 2, 3, 4, 5, 6]
    assert abs(mrr(groups, scores, labels, items) - 0.625) <= 1e-9
    assert mrr([0, 0, 1, 1], [0.2, 0.5, 0.1, 0.3], [1, 0, 1, 0], [1, 2, 3, 4]) == 0.5
    assert ndcg_at_k([0, 0], [0.9, 0.1], [1, 0], [1, 2]) == 1.0
    assert abs(ndcg_at_k([0, 0], [0.1, 0.9], [1, 0], [1, 2]) - 1 / math.log2(3)) <= 1e-9
    assert abs(1 / math.log2(3) - 0.6309) <= 1e-4
    assert ndcg_at_k([0] * 3, [0.1, 0.5, 0.9], [1, 0, 0], [1, 2, 3]) == 0.0


def test_rank_ties_broken_by_item_index():
    assert positive_ranks([0, 0], [0.5, 0.5], [1, 0], [7, 3]).tolist() == [2]
    assert positive_ranks([0, 0], [0.5, 0.5], [1, 0], [2, 3]).tolist() == [1]


def test_ranking_metric_bounds_and_k_monotone():
    rng = np.random.default_rng(2)
    groups = np.repeat(np.arange(40), 5)
    labels = np.tile([1, 0, 0, 0, 0], 40)
    scores, items = rng.random(200), rng.permutation(200)
    vals = [ndcg_at_k(groups, scores, labels, items, k) for k in range(1, 6)]
    assert all(0 <= v <= 1 for v in vals) and vals == sorted(vals)
    assert 0 <= mrr(groups, scores, labels, items) <= 1


def test_length_breakdown_quintiles():
    users = np.repeat(np.arange(10), 2)
    lens = np.repeat(np.arange(1, 11), 2)
    scores = np.tile([0.9, 0.1], 10)
    labels = np.tile([1, 0], 10)
    rows = length_breakdown(users, lens, scores, labels)
    assert [(r["min_len"], r["max_len"]) for r in rows] == [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10)]
    assert all(r["users"] == 2 and r["gauc"] == 1.0 for r in rows)


def test_length_breakdown_equal_lengths_still_five_groups():
    users = np.repeat(np.arange(12), 2)
    rows = length_breakdown(users, np.full(24, 7), np.tile([0.9, 0.1], 12), np.tile([1, 0], 12))
    assert len(rows) == 5 and sum(r["users"] for r in rows) == 12
    assert [r["users"] for r in rows] == [3, 3, 2, 2, 2]


def test_length_breakdown_recovers_difficulty_gradient():
    # score noise shrinks with history length, so GAUC should rise bucket by bucket
    rng = np.random.default_rng(3)
    n_users, per_user = 500, 20
    length = rng.integers(1, 101, n_users)
    users = np.repeat(np.arange(n_users), per_user)
    labels = np.tile([1, 0], n_users * per_user // 2)
    noise = np.repeat(3.0 / np.sqrt(length), per_user)
    scores = labels + rng.normal(0, 1, len(labels)) * noise
    rows = length_breakdown(users, np.repeat(length, per_user), scores, labels)
    g = [r["gauc"] for r in rows]
    assert g == sorted(g) and g[-1] - g[0] > 0.1


def test_evaluate_and_reports(tmp_path):
    inst = ScoredInstances(user=[0, 0, 1, 1], score=[0.9, 0.2, 0.4, 0.6], label=[1, 0, 1, 0],
                           valid_len=[3, 3, 5, 5], group=[0, 0, 1, 1], item=[1, 2, 3, 4])
    m = evaluate(inst)
    assert m["auc"] == 0.75 and m["gauc"] == 0.5 and m["mrr"] == 0.75
    assert m["candidates_per_list"] == 2.0 and m["instances"] == 4
    write_report(m, tmp_path / "m.txt", tmp_path / "m.json")
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[0].startswith("schema=") and "auc=0.750000" in text
    assert json.loads((tmp_path / "m.json").read_text())["metrics"]["mrr"] == 0.75
    assert format_report(m) == format_report(dict(reversed(list(m.items()))))
    with pytest.raises(ValueError):
        ScoredInstances([0], [math.nan], [1], [1], [0], [1])


def test_paired_bootstrap_direction():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 2, 400)
    good = labels + rng.normal(0, 0.5, 400)
    bad = labels + rng.normal(0, 2.0, 400)
    res = paired_bootstrap(auc, good, bad, labels, num_samples=200)
    assert res["gap"] > 0 and res["p_value"] < 0.05 and res["samples"] == 200
