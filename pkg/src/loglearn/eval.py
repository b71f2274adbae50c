"""Clustering algorithms and agreement/classification metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from math import comb, lgamma, log

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


# -- labelings -----------------------------------------------------------------


def as_labeling(labels) -> np.ndarray:
    """Map arbitrary hashable labels to consecutive non-negative ints (first-seen order)."""
    labels = list(labels)
    mapping: dict = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(lab, len(mapping))
    return out


def contingency(truth, pred) -> np.ndarray:
    """Counts ``n_ij = |U_i & V_j|`` as a dense int matrix."""
    u = as_labeling(truth)
    v = as_labeling(pred)
    if len(u) != len(v):
        raise ValueError(f"labelings differ in length: {len(u)} vs {len(v)}")
    table = np.zeros((u.max(initial=-1) + 1, v.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (u, v), 1)
    return table


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def _mutual_info(table: np.ndarray) -> float:
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    i, j = np.nonzero(table)
    nij = table[i, j].astype(float)
    return float(np.sum(nij / n * (np.log(nij * n) - np.log(a[i] * b[j].astype(float)))))


def _is_same_partition(table: np.ndarray) -> bool:
    return bool(np.all((table > 0).sum(axis=0) == 1) and np.all((table > 0).sum(axis=1) == 1))


# -- agreement metrics ---------------------------------------------------------


def ari(truth, pred) -> float:
    """Adjusted Rand index from the contingency table (exact integer arithmetic)."""
    table = contingency(truth, pred)
    n = int(table.sum())
    index = sum(comb(int(x), 2) for x in table.ravel())
    sa = sum(comb(int(x), 2) for x in table.sum(axis=1))
    sb = sum(comb(int(x), 2) for x in table.sum(axis=0))
    total = comb(n, 2)
    num = 2 * (index * total - sa * sb)
    den = (sa + sb) * total - 2 * sa * sb
    if den == 0:
        return 1.0
    return num / den


def expected_mutual_info(table: np.ndarray) -> float:
    """E[MI] under the hypergeometric permutation model."""
    n = int(table.sum())
    a = table.sum(axis=1).astype(int)
    b = table.sum(axis=0).astype(int)
    emi = 0.0
    lg_n = lgamma(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            base = (
                lgamma(ai + 1) + lgamma(bj + 1) + lgamma(n - ai + 1) + lgamma(n - bj + 1) - lg_n
            )
            for nij in range(lo, hi + 1):
                logp = base - (
                    lgamma(nij + 1)
                    + lgamma(ai - nij + 1)
                    + lgamma(bj - nij + 1)
                    + lgamma(n - ai - bj + nij + 1)
                )
                emi += nij / n * log(n * nij / (ai * bj)) * np.exp(logp)
    return float(emi)


def ami(truth, pred) -> float:
    """Adjusted mutual information with the arithmetic-mean normalizer."""
    table = contingency(truth, pred)
    if _is_same_partition(table):
        return 1.0
    n = int(table.sum())
    hu = _entropy(table.sum(axis=1), n)
    hv = _entropy(table.sum(axis=0), n)
    mi = _mutual_info(table)
    emi = expected_mutual_info(table)
    den = 0.5 * (hu + hv) - emi
    num = mi - emi
    if abs(den) < 1e-15:
        return 0.0
    return num / den


def v_measure(truth, pred) -> float:
    """``2 MI / (H(U) + H(V))``; 1 when both labelings are constant."""
    table = contingency(truth, pred)
    n = int(table.sum())
    hu = _entropy(table.sum(axis=1), n)
    hv = _entropy(table.sum(axis=0), n)
    if hu + hv == 0.0:
        return 1.0
    return 2.0 * _mutual_info(table) / (hu + hv)


def accuracy(truth, pred) -> float:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError("accuracy: length mismatch")
    if truth.size == 0:
        raise ValueError("accuracy of an empty labeling")
    return float(np.mean(truth == pred))


def _check_scores(truth, scores):
    truth = np.asarray(truth).astype(int)
    scores = np.asarray(scores, dtype=float)
    if truth.shape != scores.shape:
        raise ValueError("truth and scores differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not ((truth == 1).any() and (truth == 0).any()):
        raise ValueError("both classes must be present")
    return truth, scores


def roc_auc(truth, scores) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with mid-ranks for ties."""
    truth, scores = _check_scores(truth, scores)
    ranks = rankdata(scores)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    u = ranks[truth == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(truth, scores) -> float:
    """Area under the step-interpolated precision-recall curve (average precision)."""
    truth, scores = _check_scores(truth, scores)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = truth[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # one operating point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


# -- clustering ----------------------------------------------------------------


def _check_points(points, k: int) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise ValueError("points must be an (n, d) matrix")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must lie in [1, n={len(x)}]")
    return x


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: every row is already a center
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, return_centers: bool = False):
    """Lloyd's algorithm with k-means++ seeding."""
    x = _check_points(points, k)
    if k == len(x):
        labels = np.arange(len(x))
        return (labels, x.copy()) if return_centers else labels
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = np.full(len(x), -1)
    for _ in range(max_iter):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        new = np.argmin(d2, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = x[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-fit point
                far = int(np.argmax(d2[np.arange(len(x)), labels]))
                centers[c] = x[far]
    labels = _canonical(labels)
    return (labels, centers) if return_centers else labels


def _canonical(labels: np.ndarray) -> np.ndarray:
    return as_labeling(labels.tolist())


@dataclass
class GMMResult:
    labels: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihoods: list[float]


def _log_gauss_diag(x, means, variances):
    d = x.shape[1]
    diff2 = (x[:, None, :] - means[None, :, :]) ** 2
    return -0.5 * (
        d * np.log(2 * np.pi) + np.sum(np.log(variances), axis=1)[None, :] + np.sum(diff2 / variances[None], axis=-1)
    )


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def gmm_fit(points, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-8,
            var_floor: float = 1e-6) -> GMMResult:
    """EM for a diagonal-covariance Gaussian mixture, initialised from k-means."""
    x = _check_points(points, k)
    n, d = x.shape
    labels = kmeans(x, k, seed=seed)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    history: list[float] = []
    floored = False
    means = variances = weights = None
    for _ in range(max_iter):
        # M step
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = resp.T @ x / nk[:, None]
        variances = resp.T @ (x * x) / nk[:, None] - means**2
        if np.any(variances < var_floor):
            floored = True
            variances = np.maximum(variances, var_floor)
        # E step
        logp = _log_gauss_diag(x, means, variances) + np.log(np.maximum(weights, 1e-300))[None, :]
        norm = _logsumexp(logp, axis=1)
        history.append(float(norm.sum()))
        resp = np.exp(logp - norm[:, None])
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * max(1.0, abs(history[-1])):
            break
    if floored:
        warnings.warn("GMM covariance floored at %g (component collapse)" % var_floor, RuntimeWarning)
    hard = np.argmax(resp, axis=1)
    return GMMResult(hard, means, variances, weights, history)


def gmm_cluster(points, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-8) -> np.ndarray:
    return _canonical(gmm_fit(points, k, seed, max_iter, tol).labels)


def agglomerative(points, k: int, linkage: str = "ward") -> np.ndarray:
    """Bottom-up merging via Lance-Williams updates; ties go to the lowest index pair."""
    x = _check_points(points, k)
    if linkage not in ("ward", "average", "complete"):
        raise ValueError(f"unknown linkage {linkage!r}")
    n = len(x)
    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    # ward works on squared distances, the others on euclidean
    dist = sq.copy() if linkage == "ward" else np.sqrt(sq)
    np.fill_diagonal(dist, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = np.arange(n)
    for _ in range(n - k):
        # row-major argmin on a symmetric matrix yields the lowest (i, j), i < j
        i, j = divmod(int(np.argmin(dist)), n)
        ni, nj = size[i], size[j]
        others = active.copy()
        others[[i, j]] = False
        o = np.flatnonzero(others)
        if linkage == "ward":
            no = size[o]
            new = ((ni + no) * dist[i, o] + (nj + no) * dist[j, o] - no * dist[i, j]) / (ni + nj + no)
        elif linkage == "average":
            new = (ni * dist[i, o] + nj * dist[j, o]) / (ni + nj)
        else:
            new = np.maximum(dist[i, o], dist[j, o])
        dist[i, o] = new
        dist[o, i] = new
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        size[i] = ni + nj
        active[j] = False
        members[members == j] = i
    return _canonical(members)


ALGORITHMS = ("kmeans", "gmm", "agglomerative")


def cluster(points, k: int, algo: str = "gmm", seed: int = 0) -> np.ndarray:
    if algo == "kmeans":
        return kmeans(points, k, seed=seed)
    if algo == "gmm":
        return gmm_cluster(points, k, seed=seed)
    if algo == "agglomerative":
        return agglomerative(points, k)
    if algo.startswith("agglomerative:"):
        return agglomerative(points, k, linkage=algo.split(":", 1)[1])
    raise ValueError(f"unknown clustering algorithm {algo!r}")


def cluster_and_score(embeddings, truth, algo: str = "gmm", k: int | None = None, seed: int = 0) -> dict[str, float]:
    """Cluster embeddings and compare with ``truth``: returns ARI, AMI and V-measure."""
    truth = list(truth)
    if k is None or k <= 0:
        k = len(set(truth))
    pred = cluster(embeddings, k, algo=algo, seed=seed)
    return {"ari": ari(truth, pred), "ami": ami(truth, pred), "v_measure": v_measure(truth, pred)}
