"""
Tabular cohort of decision-time states and its CSV representation
"""
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

from ..errors import DataError
from ..policy.policy_core import ExpertMask

logger = logging.getLogger(__name__)

FILE_PATH = Union[str, bytes, os.PathLike]

SPLITS = ("train", "val", "test")
FEATURE_COLUMNS = ["logit_0", "logit_1", "prob_1", "vim_risk_z", "quality_risk",
                   "uncertainty", "vCDR", "aCDR"]
BASE_COLUMNS = ["id", "cohort", "y"] + FEATURE_COLUMNS
EXPERT_PATTERN = re.compile(r"^expert_(\d+)$")
CONSISTENCY_TOL = 1e-6


def expert_column(j: int) -> str:
    """Column name of expert j (0-based)"""
    return f"expert_{j + 1}"


@dataclass
class DecisionState:
    """
    Per-case routing input plus label and expert observations
    """
    prob_1: float
    logit_0: float
    logit_1: float
    vim_risk_z: float
    quality_risk: float
    uncertainty: float
    vcdr: float
    acdr: float
    label: int
    expert_labels: np.ndarray
    mask: ExpertMask = None
    id: str = None
    cohort: str = None

    def __post_init__(self):
        self.expert_labels = np.asarray(self.expert_labels, dtype=np.float64)
        if self.mask is None:
            self.mask = ExpertMask(np.where(np.isnan(self.expert_labels), 0, 1))

    def check(self) -> None:
        if self.label not in (0, 1):
            raise DataError(f"{self.id}: label must be 0 or 1, got {self.label}")
        observed = ~np.isnan(self.expert_labels)
        if not np.array_equal(observed.astype(np.int8), self.mask.bits):
            raise DataError(f"{self.id}: mask does not match the NA pattern of the expert labels")
        if np.any((self.expert_labels[observed] != 0) & (self.expert_labels[observed] != 1)):
            raise DataError(f"{self.id}: expert labels must be 0, 1 or NA")
        p = _softmax_positive(self.logit_0, self.logit_1)
        if abs(p - self.prob_1) > CONSISTENCY_TOL:
            raise DataError(f"{self.id}: prob_1={self.prob_1} disagrees with logits ({p})")
        u = 1.0 - max(self.prob_1, 1.0 - self.prob_1)
        if abs(u - self.uncertainty) > CONSISTENCY_TOL:
            raise DataError(f"{self.id}: uncertainty={self.uncertainty} disagrees with prob_1 ({u})")


def _softmax_positive(logit_0, logit_1):
    return 1.0 / (1.0 + np.exp(np.asarray(logit_0) - np.asarray(logit_1)))


@dataclass
class CohortTable:
    """
    Rows of decision states plus provenance

    ``frame`` holds the CSV columns (and, once filled, group ids and
    standardised feature columns); ``globals`` records the generator's
    difficulty parameters when the cohort was simulated.
    """
    frame: pd.DataFrame
    n_experts: int
    globals: Dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.frame)

    @property
    def expert_columns(self) -> List[str]:
        return [expert_column(j) for j in range(self.n_experts)]

    @property
    def ids(self) -> List[str]:
        return [str(x) for x in self.frame["id"]]

    def labels(self) -> np.ndarray:
        return self.frame["y"].to_numpy(dtype=np.int64)

    def expert_labels(self) -> np.ndarray:
        """(N, M) float array with NaN where the expert has no decision"""
        return self.frame[self.expert_columns].astype("Float64").to_numpy(dtype=np.float64, na_value=np.nan)

    def masks(self) -> np.ndarray:
        return (~np.isnan(self.expert_labels())).astype(np.float64)

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=np.float64)

    def split(self, name: str) -> 'CohortTable':
        if "split" not in self.frame.columns:
            raise DataError("cohort has no split column")
        sub = self.frame[self.frame["split"] == name].reset_index(drop=True)
        return CohortTable(frame=sub, n_experts=self.n_experts, globals=dict(self.globals))

    def with_frame(self, frame: pd.DataFrame) -> 'CohortTable':
        return CohortTable(frame=frame, n_experts=self.n_experts, globals=dict(self.globals))

    def state(self, i: int) -> DecisionState:
        row = self.frame.iloc[i]
        return DecisionState(prob_1=float(row["prob_1"]), logit_0=float(row["logit_0"]),
                             logit_1=float(row["logit_1"]), vim_risk_z=float(row["vim_risk_z"]),
                             quality_risk=float(row["quality_risk"]), uncertainty=float(row["uncertainty"]),
                             vcdr=float(row["vCDR"]), acdr=float(row["aCDR"]), label=int(row["y"]),
                             expert_labels=self.expert_labels()[i], id=str(row["id"]),
                             cohort=str(row["cohort"]))

    def validate(self) -> None:
        """
        Vectorised version of DecisionState.check over every row
        """
        missing = [c for c in BASE_COLUMNS + self.expert_columns if c not in self.frame.columns]
        if missing:
            raise DataError(f"cohort is missing columns {missing}")
        y = self.frame["y"].to_numpy()
        if not np.all(np.isin(y, [0, 1])):
            raise DataError("labels must be 0 or 1")
        labels = self.expert_labels()
        observed = labels[~np.isnan(labels)]
        if not np.all(np.isin(observed, [0.0, 1.0])):
            raise DataError("expert cells must be 0, 1 or NA")
        p = self.column("prob_1")
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(self.frame[FEATURE_COLUMNS].to_numpy(dtype=float))):
            raise DataError("features must be finite with prob_1 in [0, 1]")
        p_logit = _softmax_positive(self.column("logit_0"), self.column("logit_1"))
        bad = np.flatnonzero(np.abs(p_logit - p) > CONSISTENCY_TOL)
        if len(bad):
            raise DataError(f"prob_1 disagrees with logits for ids {[self.ids[i] for i in bad[:5]]}")
        u = 1.0 - np.maximum(p, 1.0 - p)
        bad = np.flatnonzero(np.abs(u - self.column("uncertainty")) > CONSISTENCY_TOL)
        if len(bad):
            raise DataError(f"uncertainty disagrees with prob_1 for ids {[self.ids[i] for i in bad[:5]]}")
        if "split" in self.frame.columns and not set(self.frame["split"]).issubset(SPLITS):
            raise DataError(f"unknown split values {sorted(set(self.frame['split']) - set(SPLITS))}")


def count_expert_columns(columns) -> int:
    idx = sorted(int(m.group(1)) for m in (EXPERT_PATTERN.match(c) for c in columns) if m)
    if idx != list(range(1, len(idx) + 1)):
        raise DataError(f"expert columns must be expert_1..expert_M, found {idx}")
    return len(idx)


def read_cohort_csv(path: FILE_PATH, validate: bool = True) -> CohortTable:
    try:
        df = pd.read_csv(path, na_values=["NA"], keep_default_na=False, dtype={"id": str, "cohort": str})
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read cohort {path}: {e}") from e
    m = count_expert_columns(df.columns)
    for c in [expert_column(j) for j in range(m)]:
        df[c] = df[c].astype("Int64")
    table = CohortTable(frame=df, n_experts=m)
    if validate:
        table.validate()
    return table


def write_cohort_csv(table: CohortTable, path: FILE_PATH) -> None:
    cols = BASE_COLUMNS + table.expert_columns + (["split"] if "split" in table.frame.columns else [])
    df = table.frame[cols].copy()
    for c in table.expert_columns:
        df[c] = df[c].astype("Int64")
    df.to_csv(path, index=False, na_rep="NA", float_format="%.12g", lineterminator="\n")
    logger.info(f"Wrote {len(df)} rows to {path}")
