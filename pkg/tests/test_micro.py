import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedpruner.errors import KeepTooLarge
from fedpruner.macro import Grouping
from fedpruner.micro import (
    BaselineKind,
    ImportanceScores,
    baseline_select,
    importance_scores,
    sample_representatives,
    selection_probabilities,
)
from fedpruner.similarity import ActivationSet, SimilarityMatrix, build_similarity

from oracles import cka_oracle


def _sim_with_adjacent(adj):
    n = len(adj)
    return SimilarityMatrix(w=np.eye(n), adjacent=np.asarray(adj, dtype=float))


def test_importance_arithmetic():
    s = importance_scores(_sim_with_adjacent([1.0, 0.8])).sigma
    assert s[0] == 0.0
    assert s[1] == pytest.approx(0.2, abs=1e-15)


def test_importance_matches_oracle():
    rng = np.random.default_rng(11)
    outs = [rng.normal(size=(10, 4))]
    for _ in range(4):
        outs.append(outs[-1] + rng.normal(size=(10, 4)))
    acts = ActivationSet(tuple(outs))
    sigma = importance_scores(build_similarity(acts)).sigma
    for n in range(1, 5):
        assert sigma[n - 1] == pytest.approx(1 - cka_oracle(acts[n - 1], acts[n]), abs=1e-10)


def test_softmax_examples():
    equal = selection_probabilities(ImportanceScores(np.full(4, 0.3)), Grouping(((1, 2, 3, 4),)))
    np.testing.assert_allclose(equal.groups[0].probabilities, 0.25, atol=1e-15)
    pair = selection_probabilities(ImportanceScores(np.array([1.0, 0.0])), Grouping(((1, 2),)))
    e = math.e
    np.testing.assert_allclose(pair.groups[0].probabilities, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    assert pair.groups[0].probabilities[0] == pytest.approx(0.731059, abs=1e-6)
    single = selection_probabilities(ImportanceScores(np.array([0.4, 0.9])), Grouping(((1,), (2,))))
    assert [g.probabilities for g in single.groups] == [(1.0,), (1.0,)]


sigmas = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=8)


@settings(max_examples=100, deadline=None)
@given(sigmas, st.floats(-5, 5, allow_nan=False))
def test_softmax_properties(sig, shift):
    grouping = Grouping((tuple(range(1, len(sig) + 1)),))
    p = np.array(selection_probabilities(ImportanceScores(np.array(sig)), grouping).groups[0].probabilities)
    q = np.array(selection_probabilities(ImportanceScores(np.array(sig) + shift), grouping).groups[0].probabilities)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(p, q, atol=1e-12)
    for i in range(len(sig)):
        for j in range(len(sig)):
            if sig[i] > sig[j] + 1e-9:
                assert p[i] > p[j]


def test_sampling_singletons_and_determinism():
    grouping = Grouping(((1,), (2,), (3,)))
    plan = selection_probabilities(ImportanceScores(np.array([0.1, 0.5, 0.2])), grouping)
    for seed in range(5):
        assert sample_representatives(plan, seed).chosen == [1, 2, 3]
    grouping = Grouping(((1, 3), (2, 4, 5)))
    plan = selection_probabilities(ImportanceScores(np.array([0.1, 0.5, 0.2, 0.9, 0.0])), grouping)
    a, b = sample_representatives(plan, 42), sample_representatives(plan, 42)
    assert a == b
    assert all(g.chosen in g.members for g in a.groups)
    assert a.chosen == sorted(a.chosen)


def test_sampling_frequency():
    plan = selection_probabilities(ImportanceScores(np.array([1.0, 0.0])), Grouping(((1, 2),)))
    p = plan.groups[0].probabilities[0]
    rng = np.random.default_rng(2024)
    draws = 100_000
    hits = sum(sample_representatives(plan, rng).groups[0].chosen == 1 for _ in range(draws))
    sd = math.sqrt(draws * p * (1 - p))
    assert abs(hits - draws * p) <= 3 * sd


# ---------------------------------------------------------------- baselines


def test_middle():
    assert baseline_select("middle", 12, 8) == [1, 2, 3, 4, 9, 10, 11, 12]


def test_deep():
    assert baseline_select("deep", 6, 3) == [1, 2, 6]
    assert baseline_select("deep", 6, 1) == [6]


def test_norm_ranks_scaled_unit_first():
    rng = np.random.default_rng(0)
    outs = [rng.normal(size=(8, 4)) for _ in range(5)]
    outs[2] = outs[2] * 10
    acts = ActivationSet(tuple(outs))
    norms = [np.linalg.norm(acts[n], axis=1).mean() for n in range(1, 5)]
    assert int(np.argmax(norms)) + 1 == 2
    assert baseline_select("norm", 4, 1, acts=acts) == [2]


def test_rm_and_bi_formulas():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 3))
    # unit 1 barely changes the stream, unit 2 rewrites it
    outs = [x, x + 1e-3 * rng.normal(size=(6, 3)), -5 * x + rng.normal(size=(6, 3))]
    acts = ActivationSet(tuple(outs))
    assert baseline_select("rm", 2, 1, acts=acts) == [2]
    assert baseline_select("bi", 2, 1, acts=acts) == [2]
    inp, out = outs[1], outs[2]
    rm = np.mean(np.linalg.norm(out - inp, axis=1) / np.linalg.norm(out, axis=1))
    from fedpruner.micro import relative_magnitude_scores
    assert relative_magnitude_scores(acts)[1] == pytest.approx(rm, rel=1e-14)


def test_ties_prefer_lower_index():
    x = np.ones((4, 2))
    acts = ActivationSet((x, x, x, x))
    assert baseline_select("norm", 3, 2, acts=acts) == [1, 2]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(BaselineKind)), st.integers(1, 12), st.data())
def test_baselines_return_keep_sorted(kind, n, data):
    keep = data.draw(st.integers(1, n))
    seed = data.draw(st.integers(0, 1000))
    rng = np.random.default_rng(seed)
    acts = ActivationSet(tuple(rng.normal(size=(5, 3)) for _ in range(n + 1)))
    a = baseline_select(kind, n, keep, acts=acts, seed=seed)
    b = baseline_select(kind, n, keep, acts=acts, seed=seed)
    assert a == b == sorted(set(a))
    assert len(a) == keep and all(1 <= u <= n for u in a)


def test_keep_too_large():
    with pytest.raises(KeepTooLarge):
        baseline_select("random", 3, 4)
