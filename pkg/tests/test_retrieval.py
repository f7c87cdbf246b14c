import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgcpn.retrieval import (
    PackedCodes,
    ap_from_ranked,
    evaluate,
    hamming,
    hamming_matrix,
    load_codes,
    pack,
    rank,
    rank_and_ap,
    save_codes,
    unpack,
    write_reports,
)


def naive_ap(rel):
    hits, total = 0, 0.0
    for pos, r in enumerate(rel, start=1):
        if r:
            hits += 1
            total += hits / pos
    return total / hits


def random_signs(rng, n, d):
    return np.where(rng.random((n, d)) < 0.5, -1, 1)


class TestPacking:
    def test_bit_layout(self):
        # bits 0, 2, 3 set -> 0b1101
        codes = pack([[1, -1, 1, 1]])
        assert codes.words.dtype == np.uint64
        assert int(codes.words[0, 0]) == 0b1101

    def test_multi_word(self):
        signs = -np.ones((1, 70), dtype=int)
        signs[0, 64] = 1
        codes = pack(signs)
        assert codes.n_words == 2
        assert int(codes.words[0, 0]) == 0 and int(codes.words[0, 1]) == 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 200))
    def test_round_trip(self, seed, n, d):
        s = random_signs(np.random.default_rng(seed), n, d)
        codes = pack(s)
        np.testing.assert_array_equal(unpack(codes), s)
        if d % 64:
            assert not np.any(codes.words[:, -1] >> np.uint64(d % 64))

    def test_rejects_non_sign(self):
        with pytest.raises(ValueError):
            pack([[1, 0]])


class TestHamming:
    def test_examples(self):
        assert hamming(pack([[1, -1, 1, 1]]), pack([[1, -1, -1, 1]])) == 1
        assert hamming(pack([[1] * 64]), pack([[-1] * 64])) == 64
        with pytest.raises(ValueError):
            hamming(pack([[1, 1]]), pack([[1, 1, 1]]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([8, 16, 63, 64, 65, 128]))
    def test_matches_naive_and_metric_axioms(self, seed, d):
        rng = np.random.default_rng(seed)
        s = random_signs(rng, 3, d)
        c = pack(s)
        dm = hamming_matrix(c, c)
        naive = (s[:, None, :] != s[None, :, :]).sum(axis=2)
        np.testing.assert_array_equal(dm, naive)
        np.testing.assert_array_equal(dm, dm.T)
        assert np.all(np.diag(dm) == 0)
        assert dm[0, 2] <= dm[0, 1] + dm[1, 2]
        # inner product identity for +-1 codes
        np.testing.assert_array_equal(s @ s.T, d - 2 * dm)

    def test_chunked_matrix(self, rng):
        q, r = pack(random_signs(rng, 600, 32)), pack(random_signs(rng, 50, 32))
        dm = hamming_matrix(q, r)
        assert dm[599, 49] == hamming(q[599], r[49])
        assert dm[300, 7] == hamming(q[300], r[7])


class TestAp:
    def test_examples(self):
        assert ap_from_ranked([1, 0, 1]) == pytest.approx(0.8333333333, abs=1e-9)
        assert ap_from_ranked([1, 1, 0, 0]) == 1.0
        assert ap_from_ranked([0, 0, 0]) is None
        assert ap_from_ranked([0, 0, 1], cutoff=2) == 0.0
        assert ap_from_ranked([1, 0, 1], cutoff=1) == 1.0

    def test_single_relevant_at_end(self):
        for n in (2, 10, 1000):
            rel = np.zeros(n)
            rel[-1] = 1
            assert ap_from_ranked(rel) == pytest.approx(1 / n)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=40).filter(any))
    def test_matches_naive_and_bounds(self, rel):
        ap = ap_from_ranked(rel)
        assert ap == pytest.approx(naive_ap(rel), abs=1e-12)
        assert 0 < ap <= 1

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.booleans(), min_size=2, max_size=30).filter(lambda r: any(r) and not all(r)),
           st.data())
    def test_promoting_a_relevant_item_never_lowers_ap(self, rel, data):
        rel = list(rel)
        i = data.draw(st.integers(1, len(rel) - 1))
        if rel[i] and not rel[i - 1]:
            swapped = rel.copy()
            swapped[i - 1], swapped[i] = True, False
            assert ap_from_ranked(swapped) >= ap_from_ranked(rel)

    def test_random_ranking_map_near_relevant_fraction(self, rng):
        n, frac = 400, 0.5
        aps = [ap_from_ranked(rng.random(n) < frac) for _ in range(400)]
        assert np.mean(aps) == pytest.approx(0.5, abs=0.02)


class TestEvaluate:
    def test_oracle_equivalence(self, rng):
        d = 24
        q = random_signs(rng, 30, d)
        r = random_signs(rng, 200, d)
        ql = (rng.random((30, 4)) < 0.3).astype(np.uint8)
        rl = (rng.random((200, 4)) < 0.3).astype(np.uint8)
        rep = evaluate(pack(q), ql, pack(r), rl, cutoffs=(10, 50))
        expected = []
        for i in range(30):
            dist = [(int(np.sum(q[i] != r[j])), j) for j in range(200)]
            order = [j for _, j in sorted(dist)]
            rel = [bool(np.any(ql[i] & rl[j])) for j in order]
            expected.append(naive_ap(rel) if any(rel) else np.nan)
        expected = np.array(expected)
        np.testing.assert_allclose(rep.ap, expected, atol=1e-12)
        assert rep.map == pytest.approx(np.nanmean(expected), abs=1e-12)
        assert rep.n_skipped == int(np.isnan(expected).sum())
        for i in range(3):
            if not np.isnan(expected[i]):
                ap = rank_and_ap(pack(q)[i], pack(r), (rl @ ql[i]) > 0)
                assert ap == pytest.approx(expected[i], abs=1e-12)

    def test_skipped_queries(self):
        q = pack([[1, 1], [-1, -1]])
        r = pack([[1, 1], [1, -1]])
        rep = evaluate(q, [[1, 0], [0, 1]], r, [[1, 0], [1, 0]])
        assert rep.n_skipped == 1
        assert rep.map == 1.0

    def test_stable_tie_break(self):
        assert rank([2, 1, 1, 0, 1]).tolist() == [3, 1, 2, 4, 0]

    def test_mismatched_labels(self):
        with pytest.raises(ValueError):
            evaluate(pack([[1, 1]]), [[1]], pack([[1, 1]]), [[1], [1]])

    def test_reports(self, tmp_path):
        rep = evaluate(pack([[1, 1], [1, -1]]), [[1], [1]], pack([[1, 1], [-1, -1]]), [[1], [0]],
                       cutoffs=(1,), task="I2T")
        write_reports([rep], tmp_path / "r.tsv", tmp_path / "r.json")
        tsv = (tmp_path / "r.tsv").read_text()
        assert "I2T\tmap\t1.0" in tsv and "I2T\tmap@1\t" in tsv
        assert '"schema": "dgcpn.eval/1"' in (tmp_path / "r.json").read_text()


class TestCodeFiles:
    def test_round_trip_and_size(self, rng, tmp_path):
        codes = pack(random_signs(rng, 1000, 64))
        save_codes(codes, tmp_path / "c.cmb")
        assert (tmp_path / "c.cmb").stat().st_size == 12 + 8000
        assert load_codes(tmp_path / "c.cmb") == codes

    def test_padding_bits_rejected(self, tmp_path):
        bad = PackedCodes(1, 4, np.array([[0xFF]], dtype=np.uint64))
        save_codes(bad, tmp_path / "bad.cmb")
        with pytest.raises(ValueError):
            load_codes(tmp_path / "bad.cmb")

    def test_truncated(self, tmp_path, rng):
        save_codes(pack(random_signs(rng, 3, 10)), tmp_path / "c.cmb")
        raw = (tmp_path / "c.cmb").read_bytes()
        (tmp_path / "c.cmb").write_bytes(raw[:-1])
        with pytest.raises(ValueError):
            load_codes(tmp_path / "c.cmb")


class TestSpecExamples:
    def test_all_plus_one_word(self):
        assert int(pack(np.ones((1, 64), dtype=int)).words[0, 0]) == 2**64 - 1

    def test_all_relevant_is_one(self, rng):
        assert ap_from_ranked(np.ones(17)) == 1.0

    def test_perfect_codes_give_map_one(self):
        signs = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
        labels = np.eye(4, dtype=np.uint8)
        rep = evaluate(pack(signs), labels, pack(signs), labels)
        assert rep.map == 1.0 and rep.n_skipped == 0

    def test_random_codes_map_near_prior(self, rng):
        n = 2000
        labels = np.eye(2, dtype=np.uint8)[rng.integers(0, 2, n)]
        codes = pack(random_signs(rng, n, 32))
        rep = evaluate(codes[:200], labels[:200], codes, labels)
        assert rep.map == pytest.approx(0.5, abs=0.05)

    def test_tie_break_follows_permutation(self, rng):
        # all distances tie, so ranking is item order; permuting items and
        # their labels together yields the permuted relevance order
        q = pack([[1, 1, 1, 1]])
        r_signs = np.ones((6, 4), dtype=int)
        labels = np.array([[1], [0], [1], [0], [0], [1]], dtype=np.uint8)
        perm = np.array([5, 0, 2, 1, 4, 3])
        a = evaluate(q, [[1]], pack(r_signs), labels).ap[0]
        b = evaluate(q, [[1]], pack(r_signs[perm]), labels[perm]).ap[0]
        assert a == pytest.approx(ap_from_ranked(labels[:, 0]))
        assert b == pytest.approx(ap_from_ranked(labels[perm, 0]))
        # with distinct distances the permutation does not matter
        # distances 0..4
        r_signs = np.array([[-1] * k + [1] * (4 - k) for k in range(5)])
        labels = labels[:5]
        perm = np.array([4, 0, 2, 1, 3])
        dist_unique = evaluate(q, [[1]], pack(r_signs), labels).ap[0]
        assert evaluate(q, [[1]], pack(r_signs[perm]), labels[perm]).ap[0] == pytest.approx(dist_unique)
