"""
Availability-support families and within-family clusters
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from ..report_model import Category, DiagnosticReport

logger = logging.getLogger(__name__)

UNSEEN = -1


def mask_key(bits) -> str:
    return "".join("1" if b > 0 else "0" for b in bits)


@dataclass
class GroupAssignment:
    """
    family[i], cluster[i] and group[i] per sample; -1 marks a family or
    group never seen when the assignment was fitted
    """
    family: np.ndarray
    cluster: np.ndarray
    group: np.ndarray
    family_keys: List[str] = field(default_factory=list)
    group_keys: List[Tuple[int, int]] = field(default_factory=list)
    edges: Dict[str, List[float]] = field(default_factory=dict)
    n_clusters: int = 2

    def __len__(self):
        return len(self.group)

    @property
    def n_groups(self) -> int:
        return len(self.group_keys)

    @property
    def n_families(self) -> int:
        return len(self.family_keys)

    def group_index(self) -> Dict[Tuple[int, int], int]:
        return {k: g for g, k in enumerate(self.group_keys)}

    def family_of_group(self, g: int) -> int:
        return self.group_keys[g][0]

    def as_dict(self) -> Dict:
        return {"n_clusters": self.n_clusters,
                "family_keys": list(self.family_keys),
                "group_keys": [list(k) for k in self.group_keys],
                "edges": {k: list(v) for k, v in self.edges.items()}}


def _edges(sorted_probs: np.ndarray, n_clusters: int) -> List[float]:
    n = len(sorted_probs)
    idx = [min(int(np.ceil(b * n / n_clusters)), n - 1) for b in range(1, n_clusters)]
    return [float(sorted_probs[i]) for i in idx]


def assign_groups(masks: np.ndarray, probs: np.ndarray, n_clusters: int = 2) -> GroupAssignment:
    """
    Family = exact mask bit pattern; cluster = rank-quantile bin of prob_1
    within the family

    With n samples in a family, the sample of (stable) rank r goes to
    cluster floor(r * n_clusters / n).
    """
    masks = np.asarray(masks)
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    keys = [mask_key(m) for m in masks]
    family_keys = sorted(set(keys))
    fam_index = {k: f for f, k in enumerate(family_keys)}
    family = np.array([fam_index[k] for k in keys], dtype=np.int64)
    cluster = np.zeros(n, dtype=np.int64)
    edges = {}
    for f, key in enumerate(family_keys):
        rows = np.flatnonzero(family == f)
        order = np.argsort(probs[rows], kind="mergesort")
        ranks = np.empty(len(rows), dtype=np.int64)
        ranks[order] = np.arange(len(rows))
        cluster[rows] = (ranks * n_clusters) // len(rows)
        edges[key] = _edges(probs[rows][order], n_clusters)
    group_keys = sorted(set(zip(family.tolist(), cluster.tolist())))
    g_index = {k: g for g, k in enumerate(group_keys)}
    group = np.array([g_index[(f, c)] for f, c in zip(family.tolist(), cluster.tolist())], dtype=np.int64)
    logger.debug(f"{len(family_keys)} families, {len(group_keys)} groups over {n} samples")
    return GroupAssignment(family=family, cluster=cluster, group=group, family_keys=family_keys,
                           group_keys=group_keys, edges=edges, n_clusters=n_clusters)


def apply_groups(fitted: GroupAssignment, masks: np.ndarray, probs: np.ndarray,
                 report: DiagnosticReport = None) -> GroupAssignment:
    """
    Assign new samples with the fitted families and bin edges
    """
    masks = np.asarray(masks)
    probs = np.asarray(probs, dtype=np.float64)
    fam_index = {k: f for f, k in enumerate(fitted.family_keys)}
    g_index = fitted.group_index()
    n = len(probs)
    family = np.full(n, UNSEEN, dtype=np.int64)
    cluster = np.zeros(n, dtype=np.int64)
    group = np.full(n, UNSEEN, dtype=np.int64)
    for i in range(n):
        key = mask_key(masks[i])
        if key not in fam_index:
            continue
        family[i] = fam_index[key]
        cluster[i] = int(np.searchsorted(fitted.edges[key], probs[i], side="right"))
        group[i] = g_index.get((int(family[i]), int(cluster[i])), UNSEEN)
    n_unseen = int((group == UNSEEN).sum())
    if n_unseen and report is not None:
        report.add_message(f'{n_unseen} samples fall in groups absent from the fitted assignment',
                           severity=0, category=Category.UnseenGroup)
    return GroupAssignment(family=family, cluster=cluster, group=group, family_keys=list(fitted.family_keys),
                           group_keys=list(fitted.group_keys), edges=dict(fitted.edges),
                           n_clusters=fitted.n_clusters)


def groups_from_dict(d: Dict) -> GroupAssignment:
    empty = np.zeros(0, dtype=np.int64)
    return GroupAssignment(family=empty, cluster=empty, group=empty, family_keys=list(d["family_keys"]),
                           group_keys=[tuple(k) for k in d["group_keys"]],
                           edges={k: list(v) for k, v in d["edges"].items()}, n_clusters=int(d["n_clusters"]))


def penalty_keys(assignment: GroupAssignment) -> np.ndarray:
    """
    Pooling key for the group penalty: the group id when known, otherwise
    the level whose prior the sample falls back to (its family, else global)
    """
    g = assignment.group.copy()
    unseen = g == UNSEEN
    fam = assignment.family[unseen]
    g[unseen] = np.where(fam != UNSEEN, assignment.n_groups + fam, assignment.n_groups + assignment.n_families)
    return g
