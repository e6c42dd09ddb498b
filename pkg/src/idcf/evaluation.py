"""Ranking metrics, latent-recovery scores and significance tests."""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .errors import DataError, DomainError


def ndcg_at_k(ranked, positives, k: int) -> float:
    """Binary-relevance NDCG@k. Returns 0.0 when there are no positives."""
    ranked = list(ranked)
    if k < 1:
        raise DomainError("k must be >= 1")
    if len(set(ranked)) != len(ranked):
        raise DataError("ranked list contains duplicate items")
    pos = set(positives)
    if not pos:
        return 0.0
    dcg = sum(1.0 / math.log2(p + 2) for p, item in enumerate(ranked[:k]) if item in pos)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, len(pos))))
    return dcg / idcg


def recall_at_k(ranked, positives, k: int) -> float:
    """|top-k & positives| / |positives|; 0.0 when there are no positives."""
    ranked = list(ranked)
    if k < 1:
        raise DomainError("k must be >= 1")
    if len(set(ranked)) != len(ranked):
        raise DataError("ranked list contains duplicate items")
    pos = set(positives)
    if not pos:
        return 0.0
    return len(pos.intersection(ranked[:k])) / len(pos)


@dataclass
class MetricReport:
    """Per-user metrics for the users that have at least one positive."""

    ks: list[int]
    users: np.ndarray
    ndcg: dict[int, np.ndarray] = field(default_factory=dict)
    recall: dict[int, np.ndarray] = field(default_factory=dict)

    def mean(self, metric: str, k: int) -> float:
        values = getattr(self, metric)[k]
        return float(values.mean()) if values.size else float("nan")

    def summary(self) -> dict[tuple[str, int], float]:
        return {(m, k): self.mean(m, k) for m in ("ndcg", "recall") for k in self.ks}


def summarize_runs(reports: list[MetricReport]) -> dict[tuple[str, int], tuple[float, float]]:
    """Mean and sample standard deviation of per-run means."""
    out = {}
    for key in reports[0].summary():
        vals = np.array([r.summary()[key] for r in reports])
        out[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def _eval_threads(threads) -> int:
    if threads is None:
        threads = os.environ.get("IDCF_THREADS", "1")
    try:
        return max(1, int(threads))
    except ValueError:
        return 1


def ranking_metrics(model, confounders, records, ks, threshold: float = 4.0, threads=None) -> MetricReport:
    """Rank each user's candidate items (their records) and score them.

    Predictions are computed in one vectorized pass; only the per-user
    ranking is distributed over threads, and results are assembled in
    ascending user order, so the report does not depend on ``threads``.
    """
    from .feedback import predict

    users, items, ratings = (np.asarray(x) for x in records)
    if len(users) == 0:
        raise DataError("no evaluation records")
    ks = sorted(int(k) for k in ks)
    scores = predict(model, confounders, users, items)
    order = np.lexsort((items, users))
    users, items, ratings, scores = users[order], items[order], ratings[order], scores[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate([[0], bounds])
    stops = np.concatenate([bounds, [len(users)]])

    def one(span):
        lo, hi = span
        it, sc = items[lo:hi], scores[lo:hi]
        pos = it[ratings[lo:hi] >= threshold]
        if pos.size == 0:
            return None
        ranked = it[np.lexsort((it, -sc))].tolist()
        plist = pos.tolist()
        return int(users[lo]), [ndcg_at_k(ranked, plist, k) for k in ks], [recall_at_k(ranked, plist, k) for k in ks]

    spans = list(zip(starts.tolist(), stops.tolist()))
    n_threads = _eval_threads(threads)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(one, spans))
    else:
        results = [one(s) for s in spans]
    results = [r for r in results if r is not None]
    report = MetricReport(ks, np.array([r[0] for r in results], dtype=np.int64))
    for j, k in enumerate(ks):
        report.ndcg[k] = np.array([r[1][j] for r in results])
        report.recall[k] = np.array([r[2][j] for r in results])
    return report


def evaluate_model(model, confounders, dataset, ks=(5,), threshold: float = 4.0, threads=None, split: str = "test") -> MetricReport:
    """Metrics on the unbiased test split; each user's candidates are their test items."""
    records = dataset.split(split)
    if len(records[0]) == 0:
        raise DataError(f"empty {split} split")
    return ranking_metrics(model, confounders, records, ks, threshold, threads)


# ---------------------------------------------------------------------------
# Latent recovery
# ---------------------------------------------------------------------------


@dataclass
class MccReport:
    mcc: float
    per_dim: np.ndarray  # matched |corr| for each true dimension
    permutation: tuple[int, ...]  # learned dimension matched to each true dimension
    signs: tuple[int, ...]


def mcc(learned, true) -> MccReport:
    """Mean absolute Pearson correlation under the best matching of learned
    to true dimensions (exhaustive for d <= 6, Hungarian otherwise)."""
    x = np.asarray(learned, dtype=np.float64)
    y = np.asarray(true, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise DomainError(f"latent shapes {x.shape} and {y.shape} must match and be 2-d")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xs = np.sqrt((xc * xc).sum(axis=0))
    ys = np.sqrt((yc * yc).sum(axis=0))
    if np.any(xs <= 1e-12 * max(1.0, np.abs(x).max())) or np.any(ys <= 1e-12 * max(1.0, np.abs(y).max())):
        raise DomainError("degenerate latent: a column has zero variance")
    corr = (yc.T @ xc) / np.outer(ys, xs)  # [true, learned]
    corr = np.clip(corr, -1.0, 1.0)
    absc = np.abs(corr)
    d = corr.shape[0]
    if d <= 6:
        best, best_perm = -1.0, None
        for perm in itertools.permutations(range(d)):
            total = sum(absc[t, perm[t]] for t in range(d))
            if total > best:
                best, best_perm = total, perm
    else:
        _, cols = linear_sum_assignment(-absc)
        best_perm = tuple(int(c) for c in cols)
    matched = np.array([absc[t, best_perm[t]] for t in range(d)])
    signs = tuple(int(np.sign(corr[t, best_perm[t]]) or 1) for t in range(d))
    return MccReport(float(matched.mean()), matched, tuple(best_perm), signs)


# ---------------------------------------------------------------------------
# Significance
# ---------------------------------------------------------------------------


def welch_t_test(a, b) -> float:
    """Two-sided Welch t-test p-value (Welch-Satterthwaite degrees of freedom)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DomainError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    t = diff / math.sqrt(se2)
    dof = se2 * se2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    return float(2.0 * stats.t.sf(abs(t), dof))
