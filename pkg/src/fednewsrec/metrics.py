"""Per-impression ranking metrics: AUC, MRR, nDCG@5 and nDCG@10.

Each impression is scored on its own and the results are averaged over
impressions. Candidates are ranked by descending score with ties broken
by ascending item id, so the ranking metrics are deterministic. AUC uses
the rank statistic with ties counted as one half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .recmodel import NewsTable, UserModelParams, encode_user


@dataclass
class EvalResult:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    impressions: int
    auc_impressions: int

    def as_row(self) -> dict:
        return {"auc": self.auc, "mrr": self.mrr, "ndcg5": self.ndcg5, "ndcg10": self.ndcg10}


def rank_order(scores, ids) -> list[int]:
    """Candidate positions sorted by descending score, then ascending id."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))


def auc(scores, labels) -> float | None:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def mrr(scores, labels, ids) -> float | None:
    order = rank_order(list(scores), list(ids))
    rr = [1.0 / (r + 1) for r, i in enumerate(order) if labels[i]]
    return float(np.mean(rr)) if rr else None


def ndcg(scores, labels, ids, k: int) -> float | None:
    order = rank_order(list(scores), list(ids))
    n_pos = int(sum(labels))
    if n_pos == 0:
        return None
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(order[:k]) if labels[i])
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(n_pos, k)))
    return dcg / idcg


def impression_metrics(scores, labels, ids) -> dict | None:
    """Metrics of one impression, or ``None`` when it has no clicked item."""
    if not any(labels):
        return None
    return {
        "auc": auc(scores, labels),
        "mrr": mrr(scores, labels, ids),
        "ndcg5": ndcg(scores, labels, ids, 5),
        "ndcg10": ndcg(scores, labels, ids, 10),
    }


def summarize(per_impression: list[dict]) -> EvalResult:
    kept = [m for m in per_impression if m is not None]
    aucs = [m["auc"] for m in kept if m["auc"] is not None]

    def mean(xs):
        return float(np.mean(xs)) if xs else float("nan")

    return EvalResult(
        auc=mean(aucs),
        mrr=mean([m["mrr"] for m in kept]),
        ndcg5=mean([m["ndcg5"] for m in kept]),
        ndcg10=mean([m["ndcg10"] for m in kept]),
        impressions=len(kept),
        auc_impressions=len(aucs),
    )


def evaluate(user_params: UserModelParams, table: NewsTable, eval_set) -> EvalResult:
    """Score ``(history, impression)`` pairs with the current model.

    Impressions without a clicked item are dropped; those without a
    non-clicked item still count for MRR and nDCG but not for AUC.
    """
    per = []
    user_cache: dict[tuple, np.ndarray] = {}
    for history, imp in eval_set:
        key = tuple(history)
        if key not in user_cache:
            X = np.array([table[n] for n in key]) if key else np.zeros((0, user_params.news_dim))
            user_cache[key] = encode_user(user_params, X)
        u = user_cache[key]
        C = np.array([table[n] for n in imp.items])
        per.append(impression_metrics(C @ u, imp.labels, imp.items))
    return summarize(per)
