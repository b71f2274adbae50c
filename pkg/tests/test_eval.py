import itertools
import math
from collections import Counter
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from sklearn import metrics as skm

from loglearn import eval as E


# -- brute-force oracles -------------------------------------------------------


def partitions(n, max_blocks=3):
    """All labelings of n items up to renaming (restricted growth strings)."""

    def grow(prefix, used):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for lab in range(min(used + 1, max_blocks)):
            yield from grow(prefix + [lab], max(used, lab + 1))

    return list(grow([], 0))


def ari_by_pairs(u, v):
    n = len(u)
    both = same_u = same_v = 0
    for i, j in itertools.combinations(range(n), 2):
        su, sv = u[i] == u[j], v[i] == v[j]
        both += su and sv
        same_u += su
        same_v += sv
    total = n * (n - 1) // 2
    if total == 0:
        return 1.0
    expected = Fraction(same_u * same_v, total)
    max_index = Fraction(same_u + same_v, 2)
    if max_index == expected:
        return 1.0
    return float((both - expected) / (max_index - expected))


def _mi_counts(u, v):
    n = len(u)
    cu, cv, cj = Counter(u), Counter(v), Counter(zip(u, v))
    return sum(c / n * math.log(c * n / (cu[a] * cv[b])) for (a, b), c in cj.items())


def _h(labels):
    n = len(labels)
    return -sum(c / n * math.log(c / n) for c in Counter(labels).values())


@lru_cache(maxsize=None)
def emi_by_permutation(u, v):
    """E[MI] as the average over every permutation of v (direct summation)."""
    perms = list(itertools.permutations(v))
    return sum(_mi_counts(u, p) for p in perms) / len(perms)


def _canon(labels):
    seen = {}
    return tuple(seen.setdefault(x, len(seen)) for x in labels)


def ami_brute(u, v):
    if len(set(zip(u, v))) == len(set(u)) == len(set(v)):
        return 1.0
    # E[MI] depends on the marginals only; sort to share the cache
    key_u = tuple(sorted(_canon(u)))
    key_v = tuple(sorted(_canon(v)))
    emi = emi_by_permutation(key_u, key_v)
    den = 0.5 * (_h(u) + _h(v)) - emi
    if abs(den) < 1e-15:
        return 0.0
    return (_mi_counts(u, v) - emi) / den


def v_brute(u, v):
    hu, hv = _h(u), _h(v)
    if hu + hv == 0:
        return 1.0
    return 2 * _mi_counts(u, v) / (hu + hv)


# -- agreement metrics -----------------------------------------------------------


class TestARI:
    def test_hand_case_exact(self):
        assert E.ari([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5

    def test_identical(self):
        assert E.ari([0, 0, 1, 2, 2], ["a", "a", "b", "c", "c"]) == 1.0

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_exhaustive_against_pair_counting(self, n):
        labs = partitions(n)
        for u in labs:
            for v in labs:
                assert abs(E.ari(u, v) - ari_by_pairs(u, v)) <= 1e-9

    def test_shuffled_truth_is_near_zero(self):
        rng = np.random.default_rng(7)
        truth = rng.integers(0, 4, 600)
        emb = np.eye(4)[truth] + 0.01 * rng.standard_normal((600, 4))
        score = E.cluster_and_score(emb, rng.permutation(truth), "kmeans", seed=0)
        assert abs(score["ari"]) <= 0.05

    def test_agrees_with_sklearn(self, rng):
        for _ in range(50):
            u, v = rng.integers(0, 4, 40), rng.integers(0, 3, 40)
            assert E.ari(u, v) == pytest.approx(skm.adjusted_rand_score(u, v), abs=1e-12)


class TestAMI:
    def test_identical(self):
        assert E.ami([0, 1, 1, 2], [5, 3, 3, 9]) == 1.0

    def test_constant_labeling(self):
        assert E.ami([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_exhaustive_against_permutation_average(self, n):
        labs = partitions(n)
        for u in labs:
            for v in labs:
                assert abs(E.ami(u, v) - ami_brute(u, v)) <= 1e-9

    def test_agrees_with_sklearn_arithmetic(self, rng):
        for _ in range(30):
            u, v = rng.integers(0, 4, 30), rng.integers(0, 3, 30)
            ref = skm.adjusted_mutual_info_score(u, v, average_method="arithmetic")
            assert E.ami(u, v) == pytest.approx(ref, abs=1e-10)


class TestVMeasure:
    def test_identical(self):
        assert E.v_measure([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)

    def test_independent_large_n(self):
        rng = np.random.default_rng(3)
        assert E.v_measure(rng.integers(0, 3, 10_000), rng.integers(0, 3, 10_000)) <= 0.05

    def test_both_constant_is_one(self):
        assert E.v_measure([1, 1, 1], [0, 0, 0]) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30))
    def test_symmetric(self, pairs):
        u, v = zip(*pairs)
        assert abs(E.v_measure(u, v) - E.v_measure(v, u)) <= 1e-12

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_exhaustive_against_direct_entropies(self, n):
        labs = partitions(n)
        for u in labs:
            for v in labs:
                assert abs(E.v_measure(u, v) - v_brute(u, v)) <= 1e-9


class TestInvariants:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=25), st.permutations(range(4)))
    def test_renaming_invariance(self, pairs, perm):
        u, v = zip(*pairs)
        renamed = [perm[x] for x in v]
        for metric in (E.ari, E.ami, E.v_measure):
            assert metric(u, v) == pytest.approx(metric(u, renamed), abs=1e-12)
            assert metric(u, v) == pytest.approx(metric([perm[x] for x in u], v), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=2, max_size=30).filter(lambda l: len(set(l)) >= 2))
    def test_self_agreement_is_one(self, u):
        assert E.ari(u, u) == 1.0
        assert E.ami(u, u) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            E.ari([0, 1], [0, 1, 1])


# -- classification metrics ------------------------------------------------------


class TestClassificationMetrics:
    @pytest.mark.parametrize("truth,pred,expected", [
        ([1, 0, 1], [1, 0, 1], 1.0),
        ([1, 0, 1], [0, 1, 0], 0.0),
        ([0, 1, 1, 0], [0, 1, 1, 1], 0.75),
    ])
    def test_accuracy(self, truth, pred, expected):
        assert E.accuracy(truth, pred) == expected

    def test_roc_perfect(self):
        assert E.roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_roc_all_ties(self):
        assert E.roc_auc([0, 1, 0, 1], [0.3] * 4) == 0.5

    def test_roc_hand_case(self):
        assert E.roc_auc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == 0.75

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(-5, 5)), min_size=2, max_size=40)
           .filter(lambda p: len({t for t, _ in p}) == 2))
    def test_roc_complement(self, pairs):
        truth, scores = zip(*pairs)
        scores = np.array(scores, dtype=float)
        assert abs(E.roc_auc(truth, scores) + E.roc_auc(truth, -scores) - 1.0) <= 1e-12
        assert E.roc_auc(truth, scores) == pytest.approx(skm.roc_auc_score(truth, scores), abs=1e-12)
        assert E.pr_auc(truth, scores) == pytest.approx(skm.average_precision_score(truth, scores), abs=1e-12)

    @pytest.mark.parametrize("fn", [E.roc_auc, E.pr_auc])
    def test_single_class_rejected(self, fn):
        with pytest.raises(ValueError):
            fn([1, 1, 1], [0.1, 0.2, 0.3])

    def test_pr_perfect(self):
        assert E.pr_auc([0, 1, 1], [0.1, 0.8, 0.9]) == 1.0


# -- clustering ------------------------------------------------------------------


def blobs(rng, k=3, per=40, d=2, spread=0.1):
    centers = 10 * rng.standard_normal((k, d))
    x = np.concatenate([c + spread * rng.standard_normal((per, d)) for c in centers])
    return x, np.repeat(np.arange(k), per)


class TestClustering:
    @pytest.mark.parametrize("algo", ["kmeans", "gmm", "agglomerative", "agglomerative:average", "agglomerative:complete"])
    def test_pure_blobs(self, algo, rng):
        x, y = blobs(rng)
        assert E.cluster_and_score(x, y, algo)["ari"] == 1.0

    @pytest.mark.parametrize("algo", ["kmeans", "gmm"])
    def test_deterministic_given_seed(self, algo, rng):
        x = rng.standard_normal((60, 3))
        np.testing.assert_array_equal(E.cluster(x, 4, algo, seed=3), E.cluster(x, 4, algo, seed=3))

    def test_k_defaults_to_distinct_truth(self, rng):
        x, y = blobs(rng, k=4)
        assert len(set(E.cluster(x, 4, "kmeans").tolist())) == 4
        assert E.cluster_and_score(x, y, "kmeans")["ari"] == 1.0

    @pytest.mark.parametrize("method", ["ward", "average", "complete"])
    def test_agglomerative_matches_scipy(self, method, rng):
        for _ in range(5):
            x = rng.standard_normal((25, 3))
            ref = fcluster(linkage(x, method=method), 4, criterion="maxclust")
            assert E.ari(E.agglomerative(x, 4, method), ref) == 1.0

    def test_agglomerative_tie_break_is_lowest_pair(self):
        x = np.array([[0.0], [1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(E.agglomerative(x, 3, "complete"), E.agglomerative(x, 3, "complete"))
        labels = E.agglomerative(x, 3, "complete")
        assert labels[0] == labels[1] and len(set(labels.tolist())) == 3

    def test_em_log_likelihood_monotone(self, rng):
        for _ in range(5):
            x = rng.standard_normal((80, 2)) * rng.uniform(0.5, 3, 2)
            ll = np.array(E.gmm_fit(x, 3, seed=1).log_likelihoods)
            assert np.all(np.diff(ll) >= -1e-9)

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            E.kmeans(np.zeros((3, 2)), 4)

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            E.cluster(np.zeros((3, 2)), 2, "dbscan")
