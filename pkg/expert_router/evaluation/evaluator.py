"""
Evaluate a trained router on one split of a cohort
"""
import logging
from typing import Dict, Optional

import numpy as np
import pandas as pd

from ..cohort.cohort_table import CohortTable
from ..config import RunConfig
from ..errors import ConfigError, DataError
from ..report_model import DiagnosticReport, ensure_report
from ..router.checkpoint import Checkpoint
from ..router.features import StateBatch, batch_from_cohort, standardize_features
from ..router.router_net import policy_forward
from .metrics import RISK_AXES, evaluate_outcomes, per_expert_table, risk_stratified_costs
from .outcomes import (AI_ONLY, ROUTER, UNIFORM_RANDOM, RoutedOutcomes, ai_only_outcomes,
                       route_outcomes, uniform_random_outcomes)
from .report import MetricsReport

logger = logging.getLogger(__name__)

SEED_UNIFORM_REFERENCE = 31
RISK_FEATURES = sorted({c for cols in RISK_AXES.values() for c in cols})


def check_compatible(ckpt: Checkpoint, cohort: CohortTable) -> None:
    if ckpt.n_experts != cohort.n_experts:
        raise ConfigError(f"checkpoint routes {ckpt.n_experts} experts but the cohort has {cohort.n_experts}")
    missing = [c for c in ckpt.feature_stats.mean if c not in cohort.frame.columns]
    if missing:
        raise ConfigError(f"cohort lacks features the checkpoint was trained on: {missing}")


def checkpoint_batch(ckpt: Checkpoint, cohort: CohortTable) -> StateBatch:
    std, _ = standardize_features(cohort, ckpt.feature_stats)
    return batch_from_cohort(std)


def route_split(ckpt: Checkpoint, cohort: CohortTable, cfg: RunConfig) -> RoutedOutcomes:
    """
    Deterministic (mode-gate) routing of every row of ``cohort``
    """
    check_compatible(ckpt, cohort)
    batch = checkpoint_batch(ckpt, cohort)
    router = {**cfg.router.model_dump(), **ckpt.router}
    trace = policy_forward(batch, ckpt.params, tau_g=router["tau_g"], tau_a=router["tau_a"], noise=None,
                           clamp=router["logit_clamp"])
    features = {c: cohort.column(c) for c in RISK_FEATURES}
    return route_outcomes(trace.policy.action_probs, batch, cohort.frame["cohort"].to_numpy(), features,
                          method=ROUTER, threshold=cfg.evaluation.ai_threshold)


def reference_outcomes(routed: RoutedOutcomes, ckpt: Checkpoint, cohort: CohortTable,
                       cfg: RunConfig) -> Dict[str, RoutedOutcomes]:
    batch = checkpoint_batch(ckpt, cohort)
    threshold = cfg.evaluation.ai_threshold
    rng = np.random.default_rng([cfg.seed, SEED_UNIFORM_REFERENCE])
    rate = float(routed.routed.mean()) if len(routed) else 0.0
    return {
        AI_ONLY: ai_only_outcomes(batch, routed.cohort, routed.features, threshold),
        UNIFORM_RANDOM: uniform_random_outcomes(batch, routed.cohort, rate, rng, routed.features, threshold),
    }


def evaluate_checkpoint(ckpt: Checkpoint, cohort: CohortTable, cfg: RunConfig, split: Optional[str] = None,
                        report: DiagnosticReport = None, cohort_name: Optional[str] = None,
                        checkpoint_hash: Optional[str] = None) -> MetricsReport:
    """
    Router, AI-only and uniform-random-defer blocks plus risk and per-expert tables
    """
    report = ensure_report(report)
    split = split or cfg.evaluation.split
    sub = cohort.split(split)
    if len(sub) == 0:
        raise DataError(f"split {split} is empty")
    routed = route_split(ckpt, sub, cfg)
    methods = {ROUTER: routed, **reference_outcomes(routed, ckpt, sub, cfg)}
    kappa = cfg.costs.tier_costs(sub.n_experts)
    blocks = {name: evaluate_outcomes(out, cfg.costs, kappa, report) for name, out in methods.items()}
    risk = pd.concat([risk_stratified_costs(methods, cfg.costs, axis, cfg.evaluation.risk_bins, kappa, report)
                      for axis in RISK_AXES], ignore_index=True)
    per_expert = per_expert_table(routed, cfg.costs, sub.expert_columns)
    logger.info(f"Evaluated {len(sub)} {split} cases: router total cost "
                f"{blocks[ROUTER]['costs']['total_cost']:.4f}, defer_soft {blocks[ROUTER]['deferral']['defer_soft']:.3f}")
    return MetricsReport(split=split, n=len(sub), methods=blocks, experts=sub.expert_columns,
                         config_hash=ckpt.config_hash, checkpoint_hash=checkpoint_hash, cohort=cohort_name,
                         risk=risk, per_expert=per_expert, diagnostics=report)
