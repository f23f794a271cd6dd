import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgr.graph import InteractionGraph, build_normalized_adjacency, spmm
from dgr.oversmooth import (compute_oversmoothing_state, dense_limit, distance_curve,
                            mean_distance_to_M, power_iterate_reference, row_diff)

from conftest import random_graph


def test_two_node_state(two_node):
    E0 = np.array([[1.0, 2.0], [3.0, -1.0]])
    st_ = compute_oversmoothing_state(two_node, E0)
    assert st_.c == 4.0
    assert np.allclose(st_.weight, np.sqrt(2.0), rtol=0, atol=0)
    expect = (E0[0] + E0[1]) / 2
    assert np.allclose(st_.point(0), expect, atol=1e-15)
    assert np.allclose(st_.point(1), expect, atol=1e-15)


def test_zero_embeddings_give_zero_state(rng):
    g = random_graph(rng, 4, 5)
    st_ = compute_oversmoothing_state(g, np.zeros((9, 3)))
    assert not st_.matrix().any()


def test_state_matches_power_iteration_8_nodes(rng):
    g = random_graph(rng, 3, 5, p=0.4)
    adj = build_normalized_adjacency(g)
    E0 = rng.normal(size=(8, 4))
    M = compute_oversmoothing_state(g, E0).matrix()
    assert np.max(np.abs(M - power_iterate_reference(adj, E0, 500))) < 1e-6


def test_power_iterate_k200_10_nodes(rng):
    g = random_graph(rng, 4, 6, p=0.4)
    adj = build_normalized_adjacency(g)
    E0 = rng.normal(size=(10, 3))
    M = compute_oversmoothing_state(g, E0).matrix()
    assert np.max(np.abs(M - power_iterate_reference(adj, E0, 200))) < 1e-8


def test_power_iterate_small_cases(two_node):
    adj = build_normalized_adjacency(two_node)
    E0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(power_iterate_reference(adj, E0, 0), E0)
    assert np.allclose(power_iterate_reference(adj, E0, 1), 0.5, atol=0)
    with pytest.raises(ValueError):
        power_iterate_reference(adj, E0, -1)


def test_rank_one_identity(rng):
    for _ in range(20):
        g = random_graph(rng, rng.integers(1, 25), rng.integers(1, 25), p=0.2)
        w = np.sqrt(g.degrees + 1.0)
        c = 2 * g.num_edges + g.num_nodes
        assert np.max(np.abs(dense_limit(g.degrees) - np.outer(w, w) / c)) < 1e-14


def test_rows_linearly_dependent(rng):
    g = random_graph(rng, 5, 6)
    M = compute_oversmoothing_state(g, rng.normal(size=(11, 4))).matrix()
    assert np.linalg.matrix_rank(M, tol=1e-10) == 1


def test_fixed_point(rng):
    for _ in range(10):
        g = random_graph(rng, rng.integers(1, 20), rng.integers(1, 20), p=0.3)
        M = compute_oversmoothing_state(g, rng.normal(size=(g.num_nodes, 5))).matrix()
        assert np.max(np.abs(spmm(build_normalized_adjacency(g), M) - M)) < 1e-10


def test_scale_equivariance(rng):
    g = random_graph(rng, 6, 7)
    E0 = rng.normal(size=(13, 4))
    a = -2.75
    Ma = compute_oversmoothing_state(g, a * E0).matrix()
    M = compute_oversmoothing_state(g, E0).matrix()
    assert np.max(np.abs(Ma - a * M)) < 1e-12


def test_disconnected_warns():
    g = InteractionGraph.from_pairs([0, 1], [0, 1], 2, 2)
    with pytest.warns(RuntimeWarning, match="2 connected components"):
        compute_oversmoothing_state(g, np.ones((4, 2)))


def test_mean_distance_small(rng):
    g = InteractionGraph.from_pairs([0], [0], 1, 1)
    E0 = rng.normal(size=(2, 2))
    st_ = compute_oversmoothing_state(g, E0)
    M = st_.matrix()
    assert mean_distance_to_M(M, st_) == 0.0
    Ek = M + np.array([[3.0, 4.0], [0.0, 0.0]])
    assert mean_distance_to_M(Ek, st_) == pytest.approx(2.5, abs=1e-12)
    with pytest.raises(ValueError):
        mean_distance_to_M(np.zeros((3, 2)), st_)


def test_distance_curve_nonincreasing(rng):
    for _ in range(10):
        g = random_graph(rng, 15, 20, p=0.15)
        adj = build_normalized_adjacency(g)
        curve = distance_curve(adj, rng.normal(size=(35, 8)))
        assert [k for k, _ in curve] == list(range(1, 21))
        d = [x for _, x in curve]
        assert all(b <= a + 1e-9 for a, b in zip(d, d[1:]))


def test_row_diff_examples():
    assert row_diff(np.ones((5, 3))) == 0.0
    assert row_diff(np.array([[0.0, 0.0], [3.0, 4.0]])) == pytest.approx(2.5, abs=1e-15)
    assert row_diff(np.array([[1.0, 2.0]])) == 0.0


def test_row_diff_brute_force(rng):
    E = rng.normal(size=(17, 3))
    brute = sum(np.linalg.norm(E[a] - E[b]) for a in range(17) for b in range(17)) / 17 ** 2
    assert row_diff(E) == pytest.approx(brute, rel=1e-12)


def test_row_diff_sampled_estimate(rng):
    E = rng.normal(size=(300, 4))
    exact = row_diff(E)
    est, se = row_diff(E, sampled=True, n_pairs=200_000, seed=1, return_stderr=True)
    assert se > 0
    assert abs(est - exact) < 5 * se


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_row_diff_translation_invariant(n, T, seed):
    r = np.random.default_rng(seed)
    E = r.normal(size=(n, T))
    t = r.normal(size=T) * 10
    assert abs(row_diff(E + t) - row_diff(E)) < 1e-10
