import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from dgcpn.dataset import PairedDataset, gen_synthetic
from dgcpn.simgraph import (
    GcParams,
    IsolatedNodeError,
    compute_gc,
    compute_gc_cached,
    conditional_prob,
    cosine,
    cosine_matrix,
    gc_final,
    gc_probability,
    load_gc,
    pairwise_distance,
    save_gc,
)


def brute_force_gc(img, txt, alpha, k, gamma, beta):
    """Plain-loop reference of the whole coherence pipeline."""
    m = len(img)

    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(x * x for x in b))
        if na < 1e-12 or nb < 1e-12:
            return 0.0
        return sum(x * y for x, y in zip(a, b)) / (na * nb)

    dist = [[(1 - alpha) * cos(img[i], img[j]) + alpha * cos(txt[i], txt[j]) for j in range(m)]
            for i in range(m)]
    pc = [[0.0] * m for _ in range(m)]
    for i in range(m):
        nbrs = sorted(range(m), key=lambda j: (-dist[i][j], j))[:k]
        total = sum(dist[i][j] for j in nbrs)
        for j in nbrs:
            pc[i][j] = dist[i][j] / total
    prob = [[sum(pc[i][q] * pc[j][q] for q in range(m)) for j in range(m)] for i in range(m)]
    s = [[2 * ((1 - gamma) * dist[i][j] + gamma * beta * prob[i][j]) - 1 for j in range(m)]
         for i in range(m)]
    return np.array(dist), np.array(pc), np.array(prob), np.array(s)


class TestCosine:
    def test_examples(self):
        assert cosine([1, 0], [1, 1]) == pytest.approx(0.70710678, abs=1e-7)
        assert cosine([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-12)
        assert cosine([1, 0], [0, 1]) == 0.0
        assert cosine([0, 0], [1, 1]) == 0.0

    def test_matrix_matches_scalar(self, rng):
        x = rng.random((7, 4))
        c = cosine_matrix(x)
        for i in range(7):
            for j in range(7):
                assert c[i, j] == pytest.approx(cosine(x[i], x[j]), abs=1e-12)

    def test_zero_row(self):
        c = cosine_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(c[0], [0.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bounded_and_symmetric(self, seed):
        x = np.random.default_rng(seed).random((6, 3)) * 10
        c = cosine_matrix(x)
        assert np.all(np.abs(c) <= 1.0)
        np.testing.assert_allclose(c, c.T, atol=1e-15)


class TestConditionalProb:
    # symmetric similarity with a tie in row 3 (columns 2 and 4 at 0.5)
    D = np.array([
        [1.0, 0.6, 0.2, 0.1, 0.0],
        [0.6, 1.0, 0.3, 0.0, 0.1],
        [0.2, 0.3, 1.0, 0.5, 0.4],
        [0.1, 0.0, 0.5, 1.0, 0.5],
        [0.0, 0.1, 0.4, 0.5, 1.0],
    ])

    def test_hand_example_k2(self):
        pc = conditional_prob(self.D, 2).toarray()
        expected = np.array([
            [5 / 8, 3 / 8, 0, 0, 0],
            [3 / 8, 5 / 8, 0, 0, 0],
            [0, 0, 2 / 3, 1 / 3, 0],
            [0, 0, 1 / 3, 2 / 3, 0],
            [0, 0, 0, 1 / 3, 2 / 3],
        ])
        np.testing.assert_allclose(pc, expected, atol=1e-15)
        prob = gc_probability(pc, method="sparse")
        assert prob[0, 1] == pytest.approx(15 / 32, abs=1e-15)
        assert prob[0, 0] == pytest.approx(17 / 32, abs=1e-15)
        assert prob[2, 3] == pytest.approx(4 / 9, abs=1e-15)
        assert prob[2, 4] == pytest.approx(1 / 9, abs=1e-15)
        assert prob[3, 4] == pytest.approx(2 / 9, abs=1e-15)
        assert prob[0, 2] == 0.0

    def test_uniform_rows(self):
        pc = conditional_prob(np.ones((6, 6)), 4)
        assert isinstance(pc, sp.csr_matrix)
        np.testing.assert_allclose(pc.data, 0.25)
        np.testing.assert_array_equal(np.diff(pc.indptr), 4)
        # ties resolve to the lowest indices
        np.testing.assert_array_equal(pc[5].indices, [0, 1, 2, 3])

    def test_k_equals_m_is_row_normalized_dist(self, rng):
        d = rng.random((5, 5))
        pc = conditional_prob(d, 5).toarray()
        np.testing.assert_allclose(pc, d / d.sum(axis=1, keepdims=True), atol=1e-15)

    def test_exclude_self(self):
        pc = conditional_prob(self.D, 2, include_self=False).toarray()
        assert np.all(np.diag(pc) == 0)
        np.testing.assert_allclose(pc.sum(axis=1), 1.0)

    def test_rejects(self):
        with pytest.raises(ValueError):
            conditional_prob(self.D, 6)
        with pytest.raises(ValueError):
            conditional_prob(self.D, 0)
        with pytest.raises(ValueError):
            conditional_prob(-self.D, 2)
        with pytest.raises(IsolatedNodeError):
            conditional_prob(np.zeros((3, 3)), 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.data())
    def test_rows_sum_to_one_with_k_entries(self, seed, m, data):
        k = data.draw(st.integers(1, m))
        d = cosine_matrix(np.random.default_rng(seed).random((m, 3)))
        pc = conditional_prob(d, k)
        np.testing.assert_allclose(np.asarray(pc.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        np.testing.assert_array_equal(np.diff(pc.indptr), k)
        assert np.all(pc.data >= 0)


class TestGcProbability:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 25), st.data())
    def test_routes_agree_with_dense(self, seed, m, data):
        k = data.draw(st.integers(1, m))
        d = cosine_matrix(np.random.default_rng(seed).random((m, 4)))
        pc = conditional_prob(d, k)
        dense = pc.toarray() @ pc.toarray().T
        for method in ("sparse", "blocked", "auto"):
            p = gc_probability(pc, method=method)
            np.testing.assert_allclose(p, dense, atol=1e-10, rtol=0)
            np.testing.assert_array_equal(p, p.T)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_cauchy_schwarz_and_bounds(self, seed):
        d = cosine_matrix(np.random.default_rng(seed).random((10, 3)))
        p = gc_probability(conditional_prob(d, 4))
        diag = np.diag(p)
        assert np.all(p >= 0) and np.all(p <= 1 + 1e-12)
        assert np.all(p ** 2 <= np.outer(diag, diag) + 1e-12)

    def test_permutation_equivariance(self, rng):
        img, txt = rng.random((9, 4)), rng.random((9, 3))
        perm = rng.permutation(9)
        params = GcParams(alpha=0.4, gamma=0.3, beta=10.0, k=3)
        a = compute_gc(PairedDataset(img, txt), params)
        b = compute_gc(PairedDataset(img[perm], txt[perm]), params)
        np.testing.assert_allclose(b.s_final, a.s_final[np.ix_(perm, perm)], atol=1e-12)


class TestPipeline:
    def test_matches_brute_force(self, small_ds):
        p = GcParams(alpha=0.3, gamma=0.4, beta=50.0, k=7)
        model = compute_gc(small_ds, p)
        dist, pc, prob, s = brute_force_gc(small_ds.img_feats.astype(float).tolist(),
                                           small_ds.txt_feats.astype(float).tolist(),
                                           0.3, 7, 0.4, 50.0)
        np.testing.assert_allclose(model.dist, dist, atol=1e-12)
        np.testing.assert_allclose(model.pcond.toarray(), pc, atol=1e-12)
        np.testing.assert_allclose(model.prob, prob, atol=1e-12)
        np.testing.assert_allclose(model.s_final, s, atol=1e-9)

    def test_alpha_endpoints(self, small_ds):
        np.testing.assert_allclose(pairwise_distance(small_ds, 0.0), cosine_matrix(small_ds.img_feats))
        np.testing.assert_allclose(pairwise_distance(small_ds, 1.0), cosine_matrix(small_ds.txt_feats))
        mid = pairwise_distance(small_ds, 0.25)
        np.testing.assert_allclose(mid, 0.75 * cosine_matrix(small_ds.img_feats)
                                   + 0.25 * cosine_matrix(small_ds.txt_feats), atol=1e-15)

    def test_gc_final_oracle(self):
        # 2 * (0.7 * 0.5 + 0.3 * 4000 * 1e-4) - 1 = 2 * 0.47 - 1
        s = gc_final(np.array([[0.5]]), np.array([[1e-4]]), gamma=0.3, beta=4000.0)
        assert s[0, 0] == pytest.approx(-0.06, abs=1e-12)

    def test_gc_final_endpoints(self, rng):
        d, p = rng.random((4, 4)), rng.random((4, 4)) * 0.01
        np.testing.assert_allclose(gc_final(d, p, 0.0, 4000.0), 2 * d - 1)
        np.testing.assert_allclose(gc_final(d, p, 1.0, 4000.0), 2 * 4000.0 * p - 1)

    def test_auto_beta(self, small_ds):
        model = compute_gc(small_ds, GcParams(alpha=0.5, k=5, auto_beta=True))
        assert model.beta == pytest.approx(1.0 / np.mean(np.diag(model.prob)))

    def test_k_larger_than_m(self, small_ds):
        with pytest.raises(ValueError):
            compute_gc(small_ds, GcParams(k=small_ds.m + 1))

    def test_params_validation(self):
        for bad in (dict(alpha=1.5), dict(gamma=-0.1), dict(beta=0.0), dict(k=0)):
            with pytest.raises(ValueError):
                GcParams(**bad)


class TestCache:
    def test_round_trip(self, small_ds, tmp_path):
        model = compute_gc(small_ds, GcParams(alpha=0.5, k=6, beta=20.0))
        save_gc(model, tmp_path / "m.gcm")
        back = load_gc(tmp_path / "m.gcm")
        for name in ("dist", "prob", "s_final"):
            assert getattr(back, name).tobytes() == getattr(model, name).tobytes()
        assert (back.pcond != model.pcond).nnz == 0
        assert back.params == model.params

    def test_cached_result_is_identical(self, small_ds, tmp_path):
        p = GcParams(alpha=0.5, k=6, beta=20.0)
        first = compute_gc_cached(small_ds, p, tmp_path)
        files = list(tmp_path.iterdir())
        assert len(files) == 1
        second = compute_gc_cached(small_ds, p, tmp_path)
        assert second.s_final.tobytes() == first.s_final.tobytes()
        compute_gc_cached(small_ds, GcParams(alpha=0.5, k=5, beta=20.0), tmp_path)
        assert len(list(tmp_path.iterdir())) == 2

    def test_corrupt_cache_is_recomputed(self, small_ds, tmp_path):
        p = GcParams(alpha=0.5, k=6, beta=20.0)
        compute_gc_cached(small_ds, p, tmp_path)
        path = next(tmp_path.iterdir())
        path.write_bytes(path.read_bytes()[:-8])
        model = compute_gc_cached(small_ds, p, tmp_path)
        assert model.s_final.tobytes() == compute_gc(small_ds, p).s_final.tobytes()
        assert load_gc(path).m == small_ds.m


def test_larger_synthetic_sparse_equals_blocked():
    ds = gen_synthetic(5, 60, 8, 8, noise=0.4, seed=7)
    pc = conditional_prob(pairwise_distance(ds, 0.5), 20)
    np.testing.assert_allclose(gc_probability(pc, "sparse"), gc_probability(pc, "blocked"), atol=1e-10)


def test_disjoint_and_identical_rows():
    pc = np.array([[0.5, 0.5, 0, 0], [0, 0, 0.3, 0.7], [0.5, 0.5, 0, 0], [0, 0, 0.3, 0.7]])
    p = gc_probability(pc, method="sparse")
    assert p[0, 1] == 0.0
    assert p[0, 2] == p[0, 0] == pytest.approx(0.5)
    assert p[1, 3] == pytest.approx(0.3 ** 2 + 0.7 ** 2)


def test_cosine_matrix_transpose_symmetry(rng):
    x, y = rng.random((4, 3)), rng.random((6, 3))
    np.testing.assert_allclose(cosine_matrix(x, y), cosine_matrix(y, x).T, atol=1e-15)
    with pytest.raises(ValueError):
        cosine_matrix(x, rng.random((2, 4)))
