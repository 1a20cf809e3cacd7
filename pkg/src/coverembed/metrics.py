"""Pair-separation and ranking metrics for cover retrieval.

Distances are squared Euclidean distances between unit embeddings, so they
lie in [0, 4]; a smaller distance means "more likely a cover".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

D_MAX = 4.0


@dataclass
class QueryRanking:
    """References for one query, ascending by distance (ties by reference id)."""

    query_id: str
    reference_ids: list[str]
    sq_distances: np.ndarray
    is_cover: np.ndarray

    def __post_init__(self):
        self.sq_distances = np.asarray(self.sq_distances, dtype=np.float64)
        self.is_cover = np.asarray(self.is_cover, dtype=bool)
        if not (len(self.reference_ids) == len(self.sq_distances) == len(self.is_cover)):
            raise InvalidInputError("ranking fields differ in length")
        if np.any(np.diff(self.sq_distances) < 0):
            raise InvalidInputError("ranking distances must be non-decreasing")


def rank_query(query_id: str, reference_ids, sq_distances, is_cover) -> QueryRanking:
    ids = np.asarray(reference_ids, dtype=object)
    d = np.asarray(sq_distances, dtype=np.float64)
    order = np.lexsort((ids.astype(str), d))
    return QueryRanking(query_id, [str(i) for i in ids[order]], d[order], np.asarray(is_cover, bool)[order])


# --- pair separation -------------------------------------------------------

@dataclass
class RocResult:
    auc: float
    tpr_at_5: float
    fpr: np.ndarray = field(repr=False)
    tpr: np.ndarray = field(repr=False)
    thresholds: np.ndarray = field(repr=False)


def tpr_at_fpr(fpr: np.ndarray, tpr: np.ndarray, target: float) -> float:
    i = int(np.searchsorted(fpr, target, side="right")) - 1  # last point with fpr <= target
    if fpr[i] == target or i == len(fpr) - 1:
        return float(tpr[i])
    f0, f1 = fpr[i], fpr[i + 1]
    return float(tpr[i] + (tpr[i + 1] - tpr[i]) * (target - f0) / (f1 - f0))


def roc(cover_dists, noncover_dists, fpr_target: float = 0.05) -> RocResult:
    """ROC from a threshold sweep: a pair is called a cover when its distance <= threshold."""
    c = np.sort(np.asarray(cover_dists, dtype=np.float64).ravel())
    n = np.sort(np.asarray(noncover_dists, dtype=np.float64).ravel())
    if c.size == 0 or n.size == 0:
        raise InvalidInputError("ROC needs at least one cover and one non-cover distance")
    thresholds = np.unique(np.concatenate([c, n]))
    tpr = np.concatenate([[0.0], np.searchsorted(c, thresholds, side="right") / c.size])
    fpr = np.concatenate([[0.0], np.searchsorted(n, thresholds, side="right") / n.size])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(auc, tpr_at_fpr(fpr, tpr, fpr_target), fpr, tpr,
                     np.concatenate([[-np.inf], thresholds]))


@dataclass
class DistanceHistogramPair:
    edges: np.ndarray
    cover_counts: np.ndarray
    noncover_counts: np.ndarray
    laplace: bool = False

    @classmethod
    def from_distances(cls, cover_dists, noncover_dists, bins: int = 200,
                       d_range: tuple[float, float] = (0.0, D_MAX), laplace: bool = False):
        edges = np.linspace(d_range[0], d_range[1], bins + 1)
        clip = lambda d: np.clip(np.asarray(d, dtype=np.float64).ravel(), *d_range)  # noqa: E731
        cc, _ = np.histogram(clip(cover_dists), bins=edges)
        nc, _ = np.histogram(clip(noncover_dists), bins=edges)
        return cls(edges, cc.astype(np.float64), nc.astype(np.float64), laplace)

    def _counts(self):
        if self.laplace:
            return self.cover_counts + 1.0, self.noncover_counts + 1.0
        return self.cover_counts, self.noncover_counts

    def densities(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-class bin probabilities, each summing to 1."""
        cc, nc = self._counts()
        if cc.sum() <= 0 or nc.sum() <= 0:
            raise InvalidInputError("each class needs at least one counted pair")
        return cc / cc.sum(), nc / nc.sum()

    def cover_prior(self) -> float:
        return float(self.cover_counts.sum() / (self.cover_counts.sum() + self.noncover_counts.sum()))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def bhattacharyya(p_cover, p_noncover=None, tol: float = 1e-6) -> float:
    """Sum over bins of sqrt(p_c * p_nc); 1 for identical, 0 for disjoint distributions."""
    if isinstance(p_cover, DistanceHistogramPair):
        p_cover, p_noncover = p_cover.densities()
    p = np.asarray(p_cover, dtype=np.float64)
    q = np.asarray(p_noncover, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError("histograms must have the same bins")
    for h in (p, q):
        if np.any(h < 0) or abs(h.sum() - 1.0) > tol:
            raise InvalidInputError("Bhattacharyya coefficient needs normalized histograms")
    return float(min(1.0, np.sum(np.sqrt(p * q))))


def posterior_curve(hist: DistanceHistogramPair, prior_cover: float | None = None) -> np.ndarray:
    """P(cover | d) per bin by Bayes' rule; NaN where neither class has density."""
    p_c, p_nc = hist.densities()
    pi_c = hist.cover_prior() if prior_cover is None else prior_cover
    if not 0 < pi_c < 1:
        raise InvalidInputError("cover prior must lie in (0, 1)")
    num = pi_c * p_c
    den = num + (1.0 - pi_c) * p_nc
    out = np.full(p_c.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


# --- ranking ---------------------------------------------------------------

def average_precision(is_cover) -> float:
    rel = np.asarray(is_cover, dtype=bool)
    hits = np.nonzero(rel)[0]
    if hits.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def ranking_metrics(results, n_reference: int | None = None, top: int = 10) -> dict:
    """MAP, MT@10, MR1 and MR1 percentile over queries having at least one cover.

    Queries without any cover among their references are left out of every
    mean and counted in ``n_excluded``.
    """
    results = list(results)
    eligible = [r for r in results if r.is_cover.any()]
    if not eligible:
        raise InvalidInputError("no query has a cover among its references")
    aps = [average_precision(r.is_cover) for r in eligible]
    mt = [int(r.is_cover[:top].sum()) for r in eligible]
    r1 = [int(np.argmax(r.is_cover)) + 1 for r in eligible]
    if n_reference is None:
        n_reference = max(len(r.reference_ids) for r in results)
    mr1 = float(np.mean(r1))
    return {
        "MAP": float(np.mean(aps)),
        "MT10": float(np.mean(mt)),
        "P10": float(np.mean(mt)) / top,
        "MR1": mr1,
        "MR1_percentile": 100.0 * mr1 / n_reference,
        "n_queries": len(eligible),
        "n_excluded": len(results) - len(eligible),
    }


def pair_distances(results) -> tuple[np.ndarray, np.ndarray]:
    """Split every (query, reference) distance into cover and non-cover sets."""
    results = list(results)
    if not results:
        return np.zeros(0), np.zeros(0)
    d = np.concatenate([r.sq_distances for r in results])
    c = np.concatenate([r.is_cover for r in results])
    return d[c], d[~c]


def evaluate(results, n_reference: int | None = None, bins: int = 200, laplace: bool = False) -> dict:
    """Every scalar metric plus histogram and posterior arrays, ready for JSON."""
    results = list(results)
    report = ranking_metrics(results, n_reference)
    cov, non = pair_distances(results)
    r = roc(cov, non)
    hist = DistanceHistogramPair.from_distances(cov, non, bins=bins, laplace=laplace)
    post = posterior_curve(hist)
    report.update({
        "AuC": r.auc,
        "TPR_at_5": r.tpr_at_5,
        "BC": bhattacharyya(hist),
        "n_cover_pairs": int(cov.size),
        "n_noncover_pairs": int(non.size),
        "laplace_smoothing": laplace,
        "histogram": {
            "edges": hist.edges.tolist(),
            "cover_counts": hist.cover_counts.tolist(),
            "noncover_counts": hist.noncover_counts.tolist(),
        },
        "posterior": [None if math.isnan(v) else float(v) for v in post],
        "cover_prior": hist.cover_prior(),
    })
    return report
