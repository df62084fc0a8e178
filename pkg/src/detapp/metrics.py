"""Classification and OOD-detection metrics, Friedman statistics, sign test."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats

from .errors import EmptyList, RankSumInvalid


def accuracy_ci(accs) -> tuple[float, float]:
    """Mean and 95% normal half-width (sample sd, n-1 denominator)."""
    a = np.asarray(accs, dtype=np.float64)
    if a.size == 0:
        raise EmptyList("no accuracies")
    if a.size == 1 or np.all(a == a[0]):
        return float(a.mean()), 0.0
    return float(a.mean()), float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


def _nonempty(*arrays):
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    if any(a.size == 0 for a in out):
        raise EmptyList("score list is empty")
    return out


def fpr_at_95_tpr(id_scores, ood_scores) -> float:
    """OOD false-positive rate at the largest threshold keeping >= 95% of ID.

    Scores at or above the threshold count as ID.
    """
    ids, oods = _nonempty(id_scores, ood_scores)
    need = -(-95 * ids.size // 100)  # ceil(0.95 n) without float rounding
    thr = np.sort(ids)[::-1][need - 1]
    return float(np.mean(oods >= thr))


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney form of the ROC area; ties count one half."""
    ids, oods = _nonempty(id_scores, ood_scores)
    ranks = stats.rankdata(np.concatenate([ids, oods]))
    u = ranks[:ids.size].sum() - ids.size * (ids.size + 1) / 2.0
    return float(u / (ids.size * oods.size))


def friedman(avg_ranks, n: int) -> tuple[float, float]:
    """Friedman chi-square and the Iman-Davenport F statistic from mean ranks.

    ``avg_ranks[j]`` is method j's rank averaged over ``n`` datasets.
    """
    r = np.asarray(avg_ranks, dtype=np.float64)
    k = r.size
    if k < 2 or n < 2:
        raise RankSumInvalid("need at least two methods and two datasets")
    if abs(r.sum() - k * (k + 1) / 2.0) > 1e-6:
        raise RankSumInvalid(f"mean ranks sum to {r.sum()}, expected {k * (k + 1) / 2}")
    chi2 = 12.0 * n / (k * (k + 1)) * (np.sum(r ** 2) - k * (k + 1) ** 2 / 4.0)
    ff = (n - 1) * chi2 / (n * (k - 1) - chi2)
    return float(chi2), float(ff)


def friedman_from_ranks(rank_matrix) -> tuple[float, float]:
    """Same statistics from an n x k matrix of per-dataset ranks."""
    R = np.asarray(rank_matrix, dtype=np.float64)
    if R.ndim != 2:
        raise RankSumInvalid("rank matrix must be 2-D (datasets x methods)")
    return friedman(R.mean(axis=0), R.shape[0])


def sign_test(a, b) -> tuple[int, int, float]:
    """One-sided paired sign test of a > b; ties are dropped.

    Returns ``(wins, losses, p)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    wins = int(np.sum(a > b))
    losses = int(np.sum(a < b))
    if wins + losses == 0:
        return 0, 0, 1.0
    p = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
    return wins, losses, float(p)
