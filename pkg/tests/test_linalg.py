import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedpruner.errors import KTooLarge, NotSquare, NotSymmetric
from fedpruner.linalg import inf_norm, kmeans, sym_eigen

from oracles import min_sse_bipartition


def test_identity_spectrum():
    dec = sym_eigen(np.eye(3))
    np.testing.assert_allclose(dec.eigenvalues, [1, 1, 1], atol=1e-14)


def test_diagonal_sorted():
    dec = sym_eigen(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(dec.eigenvalues, [1, 2, 3], atol=1e-14)


def test_swap_matrix():
    dec = sym_eigen([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(dec.eigenvalues, [-1, 1], atol=1e-14)
    s = 1 / np.sqrt(2)
    v0, v1 = dec.eigenvectors[:, 0], dec.eigenvectors[:, 1]
    # eigenvectors are defined up to sign
    assert np.allclose(np.abs(v0), [s, s]) and v0[0] * v0[1] < 0
    assert np.allclose(np.abs(v1), [s, s]) and v1[0] * v1[1] > 0


def test_errors():
    with pytest.raises(NotSquare):
        sym_eigen(np.ones((2, 3)))
    with pytest.raises(NotSymmetric):
        sym_eigen([[1.0, 2.0], [0.0, 1.0]])


def _random_sym(rng, n, scale=1.0):
    m = rng.normal(size=(n, n)) * scale
    return (m + m.T) / 2


@pytest.mark.parametrize("n", [1, 2, 5, 12, 24, 40])
def test_against_lapack(n):
    rng = np.random.default_rng(n)
    m = _random_sym(rng, n)
    dec = sym_eigen(m)
    np.testing.assert_allclose(dec.eigenvalues, np.linalg.eigvalsh(m), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 9), st.just(9)),
           elements=st.floats(-50, 50, allow_nan=False)),
)
def test_residual_trace_and_reconstruction(raw):
    n = raw.shape[0]
    m = raw[:, :n]
    m = (m + m.T) / 2
    dec = sym_eigen(m)
    scale = max(1.0, inf_norm(m))
    assert np.all(np.diff(dec.eigenvalues) >= 0)
    np.testing.assert_allclose(np.linalg.norm(dec.eigenvectors, axis=0), 1.0, atol=1e-10)
    resid = m @ dec.eigenvectors - dec.eigenvectors * dec.eigenvalues
    assert np.max(np.abs(resid)) <= 1e-8 * scale
    tr = np.trace(m)
    assert abs(dec.eigenvalues.sum() - tr) <= 1e-8 * abs(tr) + 1e-12 + 1e-12 * scale * n
    assert np.max(np.abs(dec.reconstruct() - m)) <= 1e-8 * scale


def test_eigen_deterministic():
    m = _random_sym(np.random.default_rng(3), 10)
    a, b = sym_eigen(m), sym_eigen(m)
    assert a.eigenvalues.tobytes() == b.eigenvalues.tobytes()
    assert a.eigenvectors.tobytes() == b.eigenvectors.tobytes()


# ---------------------------------------------------------------- k-means


def test_kmeans_1d_matches_exhaustive():
    xs = [0.0, 0.1, 10.0, 10.1]
    expected = min_sse_bipartition(xs)
    assert expected == {frozenset({0, 1}), frozenset({2, 3})}
    res = kmeans(np.array(xs)[:, None], 2, seed=0)
    got = {frozenset(np.flatnonzero(res.assignments == j).tolist()) for j in range(2)}
    assert got == expected


def test_kmeans_singletons():
    pts = np.random.default_rng(0).normal(size=(6, 2))
    res = kmeans(pts, 6, seed=1)
    assert sorted(res.assignments.tolist()) == list(range(6))
    assert res.inertia == 0.0


def test_kmeans_identical_points_repair():
    res = kmeans(np.ones((5, 3)), 2, seed=0)
    assert set(res.assignments.tolist()) == {0, 1}
    assert res.inertia == 0.0


def test_kmeans_k_too_large():
    with pytest.raises(KTooLarge):
        kmeans(np.zeros((3, 1)), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.integers(1, 6))
def test_kmeans_invariants(seed, n, k):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    # coarse grid so duplicates (and hence empty clusters) show up
    pts = rng.integers(0, 3, size=(n, 2)).astype(float)
    res = kmeans(pts, k, seed=seed, n_init=2)
    counts = np.bincount(res.assignments, minlength=k)
    assert counts.min() >= 1 and len(counts) == k
    inertia = float(np.sum((pts - res.centroids[res.assignments]) ** 2))
    assert res.inertia == pytest.approx(inertia, abs=1e-12)
    hist = np.array(res.inertia_history)
    assert np.all(np.diff(hist) <= 1e-12)


def test_kmeans_deterministic():
    pts = np.random.default_rng(5).normal(size=(40, 3))
    a, b = kmeans(pts, 4, seed=9), kmeans(pts, 4, seed=9)
    assert a.assignments.tobytes() == b.assignments.tobytes()
    assert a.centroids.tobytes() == b.centroids.tobytes()
