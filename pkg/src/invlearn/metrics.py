"""AUC, GAUC, NDCG@k and MRR over labeled evaluation splits.

Ranking metrics rank each user's own evaluation interactions (both classes),
ties broken by ascending item id.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import rankdata

from invlearn.errors import UndefinedMetricError


@dataclass
class MetricsReport:
    auc: float
    gauc: float
    ndcg_at_10: float
    mrr: float
    # GAUC bookkeeping: users with both classes vs single-class users
    users_evaluated: int
    users_skipped: int

    def to_dict(self) -> dict:
        return asdict(self)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks: ties contribute 1/2 per pair
    u_stat = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def gauc(per_user: Mapping[int, tuple]) -> tuple[float, int]:
    """Interaction-count-weighted mean of per-user AUC; returns (gauc, skipped users)."""
    num = 0.0
    den = 0
    skipped = 0
    for user in sorted(per_user):
        scores, labels = per_user[user][:2]
        y = np.asarray(labels)
        if y.size == 0 or y.min() == y.max():
            skipped += 1
            continue
        num += y.size * auc(scores, y)
        den += y.size
    if den == 0:
        raise UndefinedMetricError("GAUC needs at least one user with both classes")
    return num / den, skipped


def rank_labels(scores, labels, items=None) -> np.ndarray:
    """Labels ordered by descending score, ties by ascending item id."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    tiebreak = np.arange(s.size) if items is None else np.asarray(items).reshape(-1)
    order = np.lexsort((tiebreak, -s))
    return y[order]


def _dcg(rel: np.ndarray, k: int) -> float:
    rel = rel[:k].astype(float)
    return float(np.sum(rel / np.log2(np.arange(2, rel.size + 2))))


def ndcg_at_k(ranked: Iterable, k: int = 10) -> float:
    """Mean binary-relevance NDCG@k over lists that contain a positive."""
    values = []
    for rel in ranked:
        rel = np.asarray(rel)
        n_pos = int(rel.sum())
        if n_pos == 0:
            continue
        ideal = _dcg(np.ones(n_pos), k)
        values.append(_dcg(rel, k) / ideal)
    if not values:
        raise UndefinedMetricError("NDCG needs at least one user with a positive")
    return float(np.mean(values))


def mrr(ranked: Iterable) -> float:
    values = []
    for rel in ranked:
        hits = np.flatnonzero(np.asarray(rel))
        if hits.size:
            values.append(1.0 / (hits[0] + 1))
    if not values:
        raise UndefinedMetricError("MRR needs at least one user with a positive")
    return float(np.mean(values))


def group_by_user(users, items, scores, labels) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    users = np.asarray(users)
    order = np.argsort(users, kind="stable")
    uniq, starts = np.unique(users[order], return_index=True)
    bounds = np.append(starts, users.size)
    scores, labels, items = np.asarray(scores), np.asarray(labels), np.asarray(items)
    out = {}
    for u, lo, hi in zip(uniq.tolist(), bounds[:-1], bounds[1:]):
        idx = order[lo:hi]
        out[u] = (scores[idx], labels[idx], items[idx])
    return out


def evaluate(scores, users, items, labels, k: int = 10) -> MetricsReport:
    """All four metrics for one scored split."""
    per_user = group_by_user(users, items, scores, labels)
    g, skipped = gauc(per_user)
    ranked = [rank_labels(s, y, i) for s, y, i in per_user.values()]
    return MetricsReport(
        auc=auc(scores, labels),
        gauc=g,
        ndcg_at_10=ndcg_at_k(ranked, k),
        mrr=mrr(ranked),
        users_evaluated=len(per_user) - skipped,
        users_skipped=skipped,
    )
