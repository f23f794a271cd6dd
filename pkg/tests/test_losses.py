import math

import numpy as np
import pytest

from dgr.graph import InteractionGraph
from dgr.losses import (BatchTriples, LecIndex, RowGrad, bpr_loss, build_lec_index, l2_regularizer,
                        lec_loss, load_lec_index, log_sigmoid, save_lec_index, total_loss)

from conftest import brute_force_index, fd_gradient, random_graph, rel_err


def index_as_dict(index: LecIndex):
    return {i: (list(zip(index.similar(i).tolist(), index.similar_counts(i).tolist())),
                list(zip(index.marginal(i).tolist(), index.marginal_counts(i).tolist())))
            for i in range(index.num_items)}


def star():
    # items 0 and 1 both linked to users {0, 1, 2}
    return InteractionGraph.from_pairs([0, 1, 2, 0, 1, 2], [0, 0, 0, 1, 1, 1], 3, 2)


def test_index_star_threshold():
    idx = build_lec_index(star(), K1=5, K2=5, theta=2)
    assert idx.similar(0).tolist() == [1]
    assert idx.similar_counts(0).tolist() == [3]
    idx = build_lec_index(star(), K1=5, K2=5, theta=3)
    assert idx.similar(0).size == 0 and idx.marginal(0).size == 0


def test_index_matches_brute_force_12x15(rng):
    g = random_graph(rng, 12, 15, p=0.35, connected=False)
    idx = build_lec_index(g, K1=2, K2=2, theta=1)
    assert index_as_dict(idx) == brute_force_index(g, 2, 2, 1)


def test_index_invariants_and_determinism(rng):
    g = random_graph(rng, 15, 12, p=0.4)
    idx = build_lec_index(g, K1=3, K2=4, theta=1)
    assert idx == build_lec_index(g, K1=3, K2=4, theta=1)
    for i in range(g.num_items):
        S, M = set(idx.similar(i).tolist()), set(idx.marginal(i).tolist())
        assert not S & M and i not in S | M
        for j, c in list(zip(idx.similar(i), idx.similar_counts(i))) + \
                list(zip(idx.marginal(i), idx.marginal_counts(i))):
            both = np.intersect1d(g.users_of(i), g.users_of(j)).size
            assert c == both > 1
            # symmetric counts
            back = dict(zip(idx.similar(j).tolist(), idx.similar_counts(j).tolist()))
            back.update(zip(idx.marginal(j).tolist(), idx.marginal_counts(j).tolist()))
            if i in back:
                assert back[i] == c


def test_index_blocks_do_not_matter(rng):
    g = random_graph(rng, 20, 25, p=0.3)
    assert build_lec_index(g, 2, 3, 0, block=3) == build_lec_index(g, 2, 3, 0, block=1000)


def test_index_capped_mode_warns(rng):
    g = random_graph(rng, 20, 10, p=0.9)
    with pytest.warns(RuntimeWarning, match="candidate"):
        idx = build_lec_index(g, 2, 2, 0, exact=False, max_candidates=15)
    assert idx.num_items == 10


@pytest.mark.parametrize("binary", [False, True])
def test_index_save_load(tmp_path, rng, binary):
    g = random_graph(rng, 10, 12, p=0.4)
    idx = build_lec_index(g, 2, 3, 1)
    p = tmp_path / "idx"
    save_lec_index(idx, p, binary=binary)
    assert load_lec_index(p) == idx


def test_log_sigmoid_stable():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    y = log_sigmoid(x)
    assert np.all(np.isfinite(y))
    assert y[2] == pytest.approx(-math.log(2))
    assert y[0] == pytest.approx(-1000.0)


def test_bpr_equal_scores_is_ln2():
    R = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
    loss, _ = bpr_loss(BatchTriples(np.array([0]), np.array([0]), np.array([1])), R, 1)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_bpr_large_margin_goes_to_zero():
    R = np.array([[1.0, 0.0], [1e3, 0.0], [-1e3, 0.0]])
    loss, grad = bpr_loss(BatchTriples(np.array([0]), np.array([0]), np.array([1])), R, 1)
    assert loss < 1e-300 + 1e-12
    assert np.all(np.isfinite(grad.values))


def test_bpr_validation():
    g = InteractionGraph.from_pairs([0], [0], 1, 2)
    R = np.zeros((3, 2))
    with pytest.raises(ValueError):
        bpr_loss(BatchTriples(np.array([0]), np.array([1]), np.array([0])), R, 1, graph=g)
    bpr_loss(BatchTriples(np.array([0]), np.array([0]), np.array([1])), R, 1, graph=g)


def _bpr_case(rng, n_users=4, n_items=6, T=4, B=10):
    R = rng.normal(size=(n_users + n_items, T))
    trip = BatchTriples(rng.integers(0, n_users, B), rng.integers(0, n_items, B),
                        rng.integers(0, n_items, B))
    return R, trip


def test_bpr_gradient_fd(rng):
    R, trip = _bpr_case(rng)
    _, grad = bpr_loss(trip, R, 4)
    num = fd_gradient(lambda X: bpr_loss(trip, X, 4)[0], R)
    assert rel_err(grad.to_dense(R.shape[0]), num) < 1e-4


def test_bpr_literal_formula(rng):
    R, trip = _bpr_case(rng)
    loss, _ = bpr_loss(trip, R, 4)
    ref = 0.0
    for u, i, j in zip(trip.users, trip.pos, trip.neg):
        x = R[u] @ R[4 + i] - R[u] @ R[4 + j]
        ref += -math.log(1 / (1 + math.exp(-x)))
    assert loss == pytest.approx(ref, rel=1e-12)


def lec_reference(users, items, R, index, g, normalize=False):
    """Literal triple sum over S(i) x M(i)."""
    nu = g.num_users
    total = 0.0
    ls = lambda x: -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))
    for u, i in zip(users, items):
        S, M = index.similar(i), index.marginal(i)
        scale = 1.0 / (len(S) * len(M)) if normalize and len(S) and len(M) else 1.0
        for s in S:
            for m in M:
                ws = 1 / math.sqrt((g.user_degree[u] + 1) * (g.item_degree[s] + 1))
                wm = 1 / math.sqrt((g.user_degree[u] + 1) * (g.item_degree[m] + 1))
                xs, xm = R[u] @ R[nu + s], R[u] @ R[nu + m]
                total += -scale * (ws * ls(xs) - wm * ls(xm))
    return total


def lec_case(rng):
    while True:
        g = random_graph(rng, 5, 8, p=0.6)
        idx = build_lec_index(g, K1=2, K2=2, theta=1)
        has = [i for i in range(8) if idx.similar(i).size and idx.marginal(i).size]
        if has:
            break
    u, i = g.edges()
    R = rng.normal(size=(g.num_nodes, 4)) * 0.5
    return g, idx, u, i, R


def test_lec_loss_matches_literal_sum(rng):
    for _ in range(5):
        g, idx, u, i, R = lec_case(rng)
        for norm in (False, True):
            loss, _ = lec_loss(u, i, R, idx, g, normalize_pairs=norm)
            assert loss == pytest.approx(lec_reference(u, i, R, idx, g, norm), rel=1e-10)


def test_lec_gradient_fd(rng):
    g, idx, u, i, R = lec_case(rng)
    for norm in (False, True):
        _, grad = lec_loss(u, i, R, idx, g, normalize_pairs=norm)
        num = fd_gradient(lambda X: lec_loss(u, i, X, idx, g, norm)[0], R)
        assert rel_err(grad.to_dense(R.shape[0]), num) < 1e-4


def test_lec_empty_similar_sets():
    g = star()
    idx = build_lec_index(g, 5, 5, theta=3)
    loss, grad = lec_loss(np.array([0, 1]), np.array([0, 1]), np.ones((5, 2)), idx, g)
    assert loss == 0.0 and len(grad) == 0


def test_lec_zero_embeddings_single_pair():
    # user 0 -> item 0; S(0) = {1}, M(0) = {2} set by hand
    g = InteractionGraph.from_pairs([0, 0, 1, 2, 2, 3], [0, 1, 1, 1, 2, 2], 4, 3)
    idx = LecIndex(1, 1, 0, 3, np.array([0, 1, 1, 1]), np.array([1]), np.array([9]),
                   np.array([0, 1, 1, 1]), np.array([2]), np.array([1]))
    loss, _ = lec_loss(np.array([0]), np.array([0]), np.zeros((7, 3)), idx, g)
    w_s = 1 / math.sqrt((2 + 1) * (3 + 1))
    w_m = 1 / math.sqrt((2 + 1) * (2 + 1))
    # -(w_s log sig(0) - w_m log sig(0)) = (w_s - w_m) ln 2
    assert loss == pytest.approx((w_s - w_m) * math.log(2), abs=1e-15)


def test_lec_monotone_in_similarity(rng):
    g = InteractionGraph.from_pairs([0, 0, 1, 2, 2, 3], [0, 1, 1, 1, 2, 2], 4, 3)
    idx = LecIndex(1, 1, 0, 3, np.array([0, 1, 1, 1]), np.array([1]), np.array([9]),
                   np.array([0, 1, 1, 1]), np.array([2]), np.array([1]))
    for _ in range(50):
        R = rng.normal(size=(7, 3))
        base, _ = lec_loss([0], [0], R, idx, g)
        up_s = R.copy()
        up_s[4 + 1] += 0.1 * R[0] / np.linalg.norm(R[0])   # raises e_u . e_s
        up_m = R.copy()
        up_m[4 + 2] += 0.1 * R[0] / np.linalg.norm(R[0])   # raises e_u . e_m
        assert lec_loss([0], [0], up_s, idx, g)[0] < base
        assert lec_loss([0], [0], up_m, idx, g)[0] > base


def test_lec_finite_for_extreme_embeddings(rng):
    g, idx, u, i, R = lec_case(rng)
    loss, grad = lec_loss(u, i, R * 1e4, idx, g)
    assert math.isfinite(loss) and np.all(np.isfinite(grad.values))


def test_total_loss():
    assert total_loss(1.25, 7.0, 0.0) == 1.25
    assert total_loss(1.0, 2.0, 0.5) == 2.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -1.0)


def test_total_gradient_fd(rng):
    g, idx, u, i, R = lec_case(rng)
    trip = BatchTriples(u, i, (i + 1) % g.num_items)
    lam = 0.3

    def f(X):
        return total_loss(bpr_loss(trip, X, g.num_users)[0], lec_loss(u, i, X, idx, g)[0], lam)

    G = bpr_loss(trip, R, g.num_users)[1].to_dense(R.shape[0])
    lec_loss(u, i, R, idx, g)[1].add_to(G, lam)
    assert rel_err(G, fd_gradient(f, R)) < 1e-4


def test_l2_examples(rng):
    E = rng.normal(size=(4, 2))
    loss, grad = l2_regularizer(E, {0, 2}, 0.0)
    assert loss == 0.0 and len(grad) == 0
    E = np.array([[3.0, 4.0], [1.0, 1.0]])
    loss, grad = l2_regularizer(E, {0}, 1.0)
    assert loss == 12.5
    assert grad.rows.tolist() == [0] and grad.values.tolist() == [[3.0, 4.0]]


def test_l2_gradient_fd(rng):
    E = rng.normal(size=(6, 3))
    rows = np.array([0, 3, 3, 5])
    _, grad = l2_regularizer(E, rows, 0.7)
    num = fd_gradient(lambda X: l2_regularizer(X, rows, 0.7)[0], E)
    assert rel_err(grad.to_dense(6), num) < 1e-4


def test_rowgrad_roundtrip(rng):
    D = np.zeros((5, 2))
    D[[1, 3]] = rng.normal(size=(2, 2))
    g = RowGrad.from_dense(D)
    assert g.rows.tolist() == [1, 3]
    assert np.array_equal(g.to_dense(5), D)
