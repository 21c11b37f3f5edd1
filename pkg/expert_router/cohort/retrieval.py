"""
Label-matched nearest-neighbour retrieval of pseudo expert labels
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..report_model import Category, DiagnosticReport

logger = logging.getLogger(__name__)


@dataclass
class RetrievalResult:
    neighbors: np.ndarray
    scores: np.ndarray
    labels: np.ndarray


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def minmax_normalize(s: np.ndarray) -> np.ndarray:
    lo, hi = s.min(), s.max()
    if hi - lo <= 0:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def fused_scores(query: Sequence[np.ndarray], pool: Sequence[np.ndarray]) -> np.ndarray:
    """
    Cosine score per embedding family, min-max normalised per query, then averaged
    """
    parts = [minmax_normalize(l2_normalize(p) @ l2_normalize(e)) for e, p in zip(query, pool)]
    return np.mean(parts, axis=0)


def aggregate_labels(neighbor_labels: np.ndarray) -> np.ndarray:
    """
    Majority vote per expert over the ranked neighbours that carry that
    expert; ties go to the highest-ranked such neighbour. NaN when none does.
    """
    nb = np.asarray(neighbor_labels, dtype=np.float64)
    out = np.full(nb.shape[1], np.nan)
    for j in range(nb.shape[1]):
        col = nb[:, j]
        seen = col[~np.isnan(col)]
        if len(seen) == 0:
            continue
        ones = int((seen == 1).sum())
        zeros = len(seen) - ones
        out[j] = 1.0 if ones > zeros else 0.0 if zeros > ones else seen[0]
    return out


def retrieve_pseudo_labels(query: Sequence[np.ndarray], pool_embeddings: Sequence[np.ndarray],
                           pool_y: np.ndarray, pool_labels: np.ndarray, y_query: int, k: int = 7,
                           report: DiagnosticReport = None, query_id: str = None) -> RetrievalResult:
    """
    Top-k neighbours of ``query`` among pool rows sharing its class

    ``query`` and ``pool_embeddings`` hold one entry per embedding family;
    ``pool_labels`` is (P, M) with NaN where the pooled case lacks the
    expert. Ranking is by fused score, ties by pool position.
    """
    pool_y = np.asarray(pool_y)
    cand = np.flatnonzero(pool_y == y_query)
    m = np.asarray(pool_labels).shape[1]
    if len(cand) < k:
        msg = f'Retrieval pool for {query_id or "query"} has {len(cand)} rows of class {y_query} (< {k})'
        if report is not None:
            report.add_message(msg, category=Category.PoolTooSmall, field=query_id)
        else:
            logger.warning(msg)
    if len(cand) == 0:
        return RetrievalResult(neighbors=np.zeros(0, dtype=np.int64), scores=np.zeros(0), labels=np.full(m, np.nan))
    scores = fused_scores(query, [np.asarray(p)[cand] for p in pool_embeddings])
    order = np.lexsort((cand, -scores))[:k]
    neighbors = cand[order]
    labels = aggregate_labels(np.asarray(pool_labels, dtype=np.float64)[neighbors])
    return RetrievalResult(neighbors=neighbors, scores=scores[order], labels=labels)
