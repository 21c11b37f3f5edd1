"""
Feature standardisation and batching of decision states
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..cohort.cohort_table import CohortTable
from ..report_model import Category, DiagnosticReport

logger = logging.getLogger(__name__)

STANDARDIZED_COLUMNS = ["logit_0", "logit_1", "vim_risk_z", "quality_risk", "uncertainty", "vCDR", "aCDR"]
RISK_COLUMNS = ["vim_risk_z", "quality_risk", "uncertainty"]
LOGIT_COLUMNS = ["logit_0", "logit_1"]
STRUCT_COLUMNS = ["vCDR", "aCDR"]
STD_FLOOR = 1e-6


def z_column(name: str) -> str:
    return f"z_{name}"


@dataclass
class FeatureStats:
    """
    Train-split mean and population standard deviation per feature
    """
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @staticmethod
    def from_dict(d: Dict) -> 'FeatureStats':
        return FeatureStats(mean={k: float(v) for k, v in d["mean"].items()},
                            std={k: float(v) for k, v in d["std"].items()})


def fit_feature_stats(cohort: CohortTable, columns: List[str] = None,
                      report: DiagnosticReport = None) -> FeatureStats:
    stats = FeatureStats()
    for c in columns or STANDARDIZED_COLUMNS:
        x = cohort.column(c)
        mu = float(x.mean()) if len(x) else 0.0
        sd = float(x.std()) if len(x) else 0.0
        if sd < STD_FLOOR:
            if report is not None:
                report.add_message(f'Zero-variance feature {c}; std floored at {STD_FLOOR}',
                                   category=Category.ZeroVariance, field=c)
            else:
                logger.warning(f'Zero-variance feature {c}; std floored at {STD_FLOOR}')
            sd = STD_FLOOR
        stats.mean[c] = mu
        stats.std[c] = sd
    return stats


def standardize_features(cohort: CohortTable, stats: Optional[FeatureStats] = None,
                         report: DiagnosticReport = None):
    """
    Add z-scored copies of the continuous features

    With ``stats=None`` the statistics are fitted on ``cohort`` (use the
    training split only); otherwise they are applied verbatim.
    Returns the standardised cohort and the statistics used.
    """
    if stats is None:
        stats = fit_feature_stats(cohort, report=report)
    frame = cohort.frame.copy()
    for c, mu in stats.mean.items():
        frame[z_column(c)] = (frame[c].to_numpy(dtype=np.float64) - mu) / stats.std[c]
    return cohort.with_frame(frame), stats


@dataclass
class StateBatch:
    """
    Array view of a set of decision states as consumed by the router
    """
    risk: np.ndarray
    logits: np.ndarray
    struct: np.ndarray
    prob: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    expert_labels: np.ndarray
    index: np.ndarray
    group: np.ndarray
    ids: List[str]

    def __len__(self):
        return len(self.y)

    def take(self, rows: np.ndarray) -> 'StateBatch':
        rows = np.asarray(rows)
        return StateBatch(risk=self.risk[rows], logits=self.logits[rows], struct=self.struct[rows],
                          prob=self.prob[rows], mask=self.mask[rows], y=self.y[rows],
                          expert_labels=self.expert_labels[rows], index=self.index[rows],
                          group=self.group[rows], ids=[self.ids[i] for i in rows])


def _features(cohort: CohortTable, columns: List[str], standardized: bool) -> np.ndarray:
    cols = []
    for c in columns:
        name = z_column(c) if standardized and z_column(c) in cohort.frame.columns else c
        cols.append(cohort.column(name))
    return np.stack(cols, axis=1)


def batch_from_cohort(cohort: CohortTable, groups: Optional[np.ndarray] = None,
                      standardized: bool = True) -> StateBatch:
    """
    Build a StateBatch; standardised columns are used when present
    """
    n = len(cohort)
    return StateBatch(risk=_features(cohort, RISK_COLUMNS, standardized),
                      logits=_features(cohort, LOGIT_COLUMNS, standardized),
                      struct=_features(cohort, STRUCT_COLUMNS, standardized),
                      prob=cohort.column("prob_1"),
                      mask=cohort.masks(),
                      y=cohort.labels().astype(np.float64),
                      expert_labels=cohort.expert_labels(),
                      index=np.arange(n),
                      group=np.asarray(groups if groups is not None else np.full(n, -1), dtype=np.int64),
                      ids=cohort.ids)


def batch_from_states(states, groups: Optional[np.ndarray] = None) -> StateBatch:
    """
    StateBatch from DecisionState objects, features used as given
    """
    n = len(states)
    return StateBatch(risk=np.array([[s.vim_risk_z, s.quality_risk, s.uncertainty] for s in states], dtype=float),
                      logits=np.array([[s.logit_0, s.logit_1] for s in states], dtype=float),
                      struct=np.array([[s.vcdr, s.acdr] for s in states], dtype=float),
                      prob=np.array([s.prob_1 for s in states], dtype=float),
                      mask=np.array([s.mask.as_float() for s in states]),
                      y=np.array([s.label for s in states], dtype=float),
                      expert_labels=np.array([s.expert_labels for s in states]),
                      index=np.arange(n),
                      group=np.asarray(groups if groups is not None else np.full(n, -1), dtype=np.int64),
                      ids=[s.id or str(i) for i, s in enumerate(states)])
