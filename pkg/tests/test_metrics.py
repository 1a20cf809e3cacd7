import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coverembed.errors import InvalidInputError
from coverembed.metrics import (
    DistanceHistogramPair,
    QueryRanking,
    average_precision,
    bhattacharyya,
    evaluate,
    pair_distances,
    posterior_curve,
    rank_query,
    ranking_metrics,
    roc,
    tpr_at_fpr,
)
from oracles import brute_ap, pair_auc


def ranking(qid, flags, start=0.0):
    flags = np.asarray(flags, bool)
    return QueryRanking(qid, [f"r{i:04d}" for i in range(flags.size)],
                        start + np.arange(flags.size) * 0.01, flags)


class TestRoc:
    def test_perfect_separation(self):
        r = roc([0.1] * 5, [3.0] * 7)
        assert r.auc == 1.0 and r.tpr_at_5 == 1.0

    def test_four_pair_example(self):
        assert roc([0.2, 1.1], [0.8, 2.0]).auc == pytest.approx(0.75)

    def test_identical_distributions(self):
        rng = np.random.default_rng(0)
        assert roc(rng.uniform(0, 4, 4000), rng.uniform(0, 4, 4000)).auc == pytest.approx(0.5, abs=0.02)

    def test_matches_pair_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            cov = np.round(rng.uniform(0, 4, rng.integers(1, 12)), 1)
            non = np.round(rng.uniform(0, 4, rng.integers(1, 12)), 1)
            assert roc(cov, non).auc == pytest.approx(pair_auc(cov, non), abs=1e-12)

    def test_tpr_interpolation(self):
        fpr = np.array([0.0, 0.02, 0.10, 1.0])
        tpr = np.array([0.0, 0.5, 0.9, 1.0])
        assert tpr_at_fpr(fpr, tpr, 0.05) == pytest.approx(0.5 + 0.4 * 3 / 8)
        assert tpr_at_fpr(fpr, tpr, 0.02) == 0.5

    def test_empty_class(self):
        with pytest.raises(InvalidInputError):
            roc([], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 4), min_size=1, max_size=20), st.lists(st.floats(0, 4), min_size=1, max_size=20),
           st.floats(0.1, 3.0))
    def test_scale_invariance_and_bounds(self, cov, non, scale):
        a = roc(cov, non)
        b = roc(np.array(cov) * scale, np.array(non) * scale)
        assert 0.0 <= a.auc <= 1.0
        assert a.auc == pytest.approx(b.auc, abs=1e-12)


class TestHistogramStats:
    def test_bc_examples(self):
        p = np.full(10, 0.1)
        assert bhattacharyya(p, p) == pytest.approx(1.0)
        assert bhattacharyya([0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]) == 0.0
        half = np.r_[np.full(100, 0.01), np.zeros(100)]
        assert bhattacharyya(half, np.full(200, 0.005)) == pytest.approx(math.sqrt(0.5))

    def test_bc_unnormalized(self):
        with pytest.raises(InvalidInputError):
            bhattacharyya([0.5, 0.6], [0.5, 0.5])

    def test_histogram_layout(self):
        h = DistanceHistogramPair.from_distances([0.0, 0.01, 3.999], [2.0, 4.0])
        assert h.edges.size == 201 and h.edges[0] == 0 and h.edges[-1] == 4
        assert h.cover_counts[0] == 2 and h.cover_counts[-1] == 1 and h.noncover_counts[-1] == 1
        assert h.cover_prior() == pytest.approx(0.6)

    def test_posterior_examples(self):
        h = DistanceHistogramPair(np.array([0.0, 1.0, 2.0, 3.0]), np.array([3.0, 2.0, 5.0]), np.array([1.0, 0.0, 9.0]))
        post = posterior_curve(h, prior_cover=0.2)
        # bin 0: p_c = 0.3, p_nc = 0.1
        assert post[0] == pytest.approx(0.06 / (0.06 + 0.08))
        assert round(post[0], 4) == 0.4286
        assert post[1] == 1.0
        flat = DistanceHistogramPair(np.array([0.0, 1.0]), np.array([4.0]), np.array([4.0]))
        assert posterior_curve(flat, 0.5)[0] == 0.5

    def test_posterior_undefined_bins(self):
        h = DistanceHistogramPair(np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        post = posterior_curve(h)
        assert post[0] == 0.5 and math.isnan(post[1])

    def test_laplace(self):
        h = DistanceHistogramPair.from_distances([0.1], [3.9], bins=4, laplace=True)
        pc, pn = h.densities()
        np.testing.assert_allclose(pc, [0.4, 0.2, 0.2, 0.2])
        assert np.all(pn > 0)


class TestRanking:
    def test_perfect(self):
        res = ranking_metrics([ranking(f"q{i}", [1, 0, 0, 0]) for i in range(3)])
        assert res["MAP"] == 1.0 and res["MR1"] == 1.0 and res["MT10"] == 1.0

    def test_worked_example(self):
        rows = [ranking("q0", [1] * 10 + [0] * 190)]
        rows += [ranking(f"q{i}", [0] * 99 + [1] + [0] * 100) for i in range(1, 5)]
        res = ranking_metrics(rows)
        assert res["MT10"] == 2.0 and res["MR1"] == 80.2
        assert res["MR1_percentile"] == pytest.approx(100 * 80.2 / 200)

    def test_brute_force_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rows = []
            for q in range(int(rng.integers(1, 6))):
                flags = rng.random(int(rng.integers(1, 25))) < 0.3
                flags[rng.integers(0, flags.size)] = True
                rows.append(ranking(f"q{q}", flags))
            res = ranking_metrics(rows)
            assert res["MAP"] == pytest.approx(np.mean([brute_ap(r.is_cover) for r in rows]), abs=1e-12)
            assert res["MT10"] == np.mean([sum(r.is_cover[:10]) for r in rows])
            assert res["MR1"] == np.mean([list(r.is_cover).index(True) + 1 for r in rows])

    def test_six_reference_permutations(self):
        # every ordering of 2 covers among 6 references, checked by hand formula
        for perm in itertools.permutations(range(6)):
            flags = [p < 2 for p in perm]
            r1, r2 = [i + 1 for i, f in enumerate(flags) if f]
            assert average_precision(flags) == pytest.approx((1 / r1 + 2 / r2) / 2)

    def test_query_without_cover_is_excluded(self):
        rows = [ranking("q0", [1, 0]), ranking("q1", [0, 0])]
        res = ranking_metrics(rows)
        assert res["n_queries"] == 1 and res["n_excluded"] == 1 and res["MAP"] == 1.0

    def test_no_eligible(self):
        with pytest.raises(InvalidInputError):
            ranking_metrics([ranking("q", [0, 0])])

    def test_rank_query_ties_by_id(self):
        r = rank_query("q", ["c", "a", "b"], [0.5, 0.5, 0.1], [True, False, False])
        assert r.reference_ids == ["b", "a", "c"]
        assert r.is_cover.tolist() == [False, False, True]

    def test_unsorted_ranking_rejected(self):
        with pytest.raises(InvalidInputError):
            QueryRanking("q", ["a", "b"], [0.5, 0.1], [True, False])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=30).filter(any))
    def test_bounds(self, flags):
        ap = average_precision(flags)
        assert 0 < ap <= 1
        assert (ap == 1.0) == all(flags[: sum(flags)])


def test_evaluate_report():
    rows = [ranking("q0", [1, 0, 0, 1], 0.0), ranking("q1", [0, 1, 0, 0], 1.0)]
    rep = evaluate(rows, bins=200)
    for key in ("MAP", "MT10", "MR1", "MR1_percentile", "AuC", "TPR_at_5", "BC", "histogram", "posterior"):
        assert key in rep
    cov, non = pair_distances(rows)
    assert rep["n_cover_pairs"] == cov.size == 3 and rep["n_noncover_pairs"] == non.size == 5
    assert len(rep["posterior"]) == 200
