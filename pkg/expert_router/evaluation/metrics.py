"""
Deployment-facing metrics computed from hard-routed outcomes
"""
import logging
import math
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from ..config import CostConfig
from ..report_model import Category, DiagnosticReport, ensure_report
from .outcomes import RoutedOutcomes

logger = logging.getLogger(__name__)

STRUCTURAL = "structural"
RELIABILITY = "reliability"
RISK_AXES = {
    STRUCTURAL: ("vCDR", "aCDR"),
    RELIABILITY: ("vim_risk_z", "uncertainty"),
}
OVERALL = "overall"
BEST_ORACLE = "best_oracle"


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den > 0 else 0.0


def confusion_counts(y: np.ndarray, pred: np.ndarray) -> Dict[str, int]:
    y = np.asarray(y).astype(np.int64)
    pred = np.asarray(pred).astype(np.int64)
    return {
        "tp": int(((y == 1) & (pred == 1)).sum()),
        "fp": int(((y == 0) & (pred == 1)).sum()),
        "fn": int(((y == 1) & (pred == 0)).sum()),
        "tn": int(((y == 0) & (pred == 0)).sum()),
    }


def classification_block(y: np.ndarray, pred: np.ndarray) -> Dict[str, Any]:
    """
    Accuracy, precision, sensitivity, specificity, F1 and MCC; any ratio
    with a zero denominator is reported as 0
    """
    c = confusion_counts(y, pred)
    tp, fp, fn, tn = c["tp"], c["fp"], c["fn"], c["tn"]
    n = tp + fp + fn + tn
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    den = math.sqrt(float(tp + fp) * float(tp + fn) * float(tn + fp) * float(tn + fn))
    return dict(
        n=n,
        **c,
        accuracy=_ratio(tp + tn, n),
        precision=precision,
        sensitivity=sensitivity,
        recall=sensitivity,
        specificity=_ratio(tn, tn + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        mcc=_ratio(tp * tn - fp * fn, den),
    )


def confusion_metrics(outcomes: RoutedOutcomes) -> Dict[str, Any]:
    return classification_block(outcomes.y, outcomes.predictions)


def clinical_error_costs(y: np.ndarray, pred: np.ndarray, cfg: CostConfig) -> np.ndarray:
    y = np.asarray(y)
    pred = np.asarray(pred)
    return cfg.c_fn * ((y == 1) & (pred == 0)) + cfg.c_fp * ((y == 0) & (pred == 1))


def tier_charges(actions: np.ndarray, kappa: Sequence[float], gamma_tier: float) -> np.ndarray:
    """gamma * kappa of the consulted expert, 0 for cases kept by the AI"""
    k = np.concatenate([[0.0], np.asarray(kappa, dtype=np.float64)])
    return gamma_tier * k[np.asarray(actions)]


def cost_metrics(outcomes: RoutedOutcomes, cfg: CostConfig, kappa: Optional[Sequence[float]] = None) -> Dict[str, float]:
    if kappa is None:
        kappa = cfg.tier_costs(outcomes.n_experts)
    clinical = float(clinical_error_costs(outcomes.y, outcomes.predictions, cfg).mean()) if len(outcomes) else 0.0
    expert = float(tier_charges(outcomes.actions, kappa, cfg.gamma_tier).mean()) if len(outcomes) else 0.0
    return {"clinical_cost": clinical, "expert_cost": expert, "total_cost": clinical + expert}


def deferral_rates(outcomes: RoutedOutcomes) -> Dict[str, Any]:
    m = outcomes.n_experts
    if len(outcomes) == 0:
        return {"defer_soft": 0.0, "defer_hard": 0.0, "soft_loads": [0.0] * m, "hard_freq": [0.0] * m}
    hard = np.bincount(outcomes.actions, minlength=m + 1)[1:] / len(outcomes)
    return {
        "defer_soft": float(outcomes.defer_mass.mean()),
        "defer_hard": float(outcomes.routed.mean()),
        "soft_loads": [float(v) for v in outcomes.policy[:, 1:].mean(axis=0)],
        "hard_freq": [float(v) for v in hard],
    }


def gini(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=np.float64)
    total = v.sum()
    if len(v) == 0 or total <= 0:
        return 0.0
    return float(np.abs(v[:, None] - v[None, :]).sum() / (2.0 * len(v) * total))


def concentration_metrics(loads: np.ndarray) -> Dict[str, float]:
    """
    Concentration of a nonnegative load vector over M experts

    Loads are normalised to shares first. With a single expert nothing can
    concentrate: the normalised measures are 0 and Entropy_norm is 1.
    """
    loads = np.asarray(loads, dtype=np.float64)
    m = len(loads)
    f = loads / loads.sum()
    nz = f[f > 0]
    h = float(-(nz * np.log(nz)).sum())
    top = np.sort(f)[::-1]
    hhi = float((f ** 2).sum())
    if m > 1:
        entropy_norm = h / math.log(m)
        hhi_norm = (hhi - 1.0 / m) / (1.0 - 1.0 / m)
        gini_norm = gini(f) * m / (m - 1)
    else:
        entropy_norm, hhi_norm, gini_norm = 1.0, 0.0, 0.0
    # rounding can push the normalised measures just outside [0, 1]
    entropy_norm, hhi_norm, gini_norm = (float(np.clip(v, 0.0, 1.0)) for v in (entropy_norm, hhi_norm, gini_norm))
    return {
        "top1_share": float(top[0]),
        "top2_share": float(min(top[:2].sum(), 1.0)),
        "entropy": h,
        "entropy_norm": entropy_norm,
        "entropy_collapse": 1.0 - entropy_norm,
        "n_eff": float(np.clip(math.exp(h), 1.0, m)),
        "hhi": hhi,
        "hhi_norm": hhi_norm,
        "gini_norm": gini_norm,
        "load_cv": float(f.std() / f.mean()),
        "dead_frac": float((f < 1.0 / (10.0 * m)).mean()),
    }


def collapse_diagnostics(outcomes: RoutedOutcomes, report: DiagnosticReport = None) -> Dict[str, Any]:
    """
    Concentration of the human-routed workload, from hard routing
    frequencies and from soft allocation loads
    """
    report = ensure_report(report)
    routed = outcomes.routed
    block = {"n_routed": int(routed.sum()), "hard": None, "soft": None}
    if routed.any():
        counts = np.bincount(outcomes.actions[routed], minlength=outcomes.n_experts + 1)[1:]
        block["hard"] = concentration_metrics(counts)
    soft = outcomes.policy[:, 1:].sum(axis=0)
    if soft.sum() > 0:
        block["soft"] = concentration_metrics(soft)
    block["defined"] = block["hard"] is not None
    if not block["defined"]:
        report.add_message(f"{outcomes.method}: no case was routed to an expert; collapse block undefined",
                           severity=0, category=Category.UndefinedBlock, field=outcomes.method)
    return block


def risk_scores(features: Mapping[str, np.ndarray], axis: str) -> np.ndarray:
    """Mean of the rank-normalised axis features"""
    cols = RISK_AXES[axis]
    frame = pd.DataFrame({c: np.asarray(features[c], dtype=np.float64) for c in cols})
    return frame.rank(pct=True).mean(axis=1).to_numpy()


def risk_bins(scores: np.ndarray, n_bins: int, report: DiagnosticReport = None, axis: str = None) -> np.ndarray:
    """
    Quantile bin of each case; ties share the bin of their lowest rank
    """
    report = ensure_report(report)
    n = len(scores)
    if n < n_bins:
        report.add_message(f"{n} cases for {n_bins} risk bins on {axis}; using {max(n, 1)} bins",
                           category=Category.CoarseBinning, field=axis)
        n_bins = max(n, 1)
    r = pd.Series(scores).rank(method="min").to_numpy() - 1
    return np.floor(r * n_bins / max(n, 1)).astype(np.int64)


def risk_stratified_costs(methods: Mapping[str, RoutedOutcomes], cfg: CostConfig, axis: str = STRUCTURAL,
                          n_bins: int = 5, kappa: Optional[Sequence[float]] = None,
                          report: DiagnosticReport = None) -> pd.DataFrame:
    """
    Per-bin mean costs of each method along a risk axis, in long format

    All methods must describe the same cases in the same order; the bins
    come from the first one.
    """
    if axis not in RISK_AXES:
        raise KeyError(f"unknown risk axis {axis}")
    first = next(iter(methods.values()))
    scores = risk_scores(first.features, axis)
    bins = risk_bins(scores, n_bins, report, axis)
    rows = []
    for name, out in methods.items():
        k = kappa if kappa is not None else cfg.tier_costs(out.n_experts)
        clinical = clinical_error_costs(out.y, out.predictions, cfg)
        expert = tier_charges(out.actions, k, cfg.gamma_tier)
        for b in np.unique(bins):
            sel = bins == b
            rows.append({
                "axis": axis,
                "method": name,
                "bin": int(b),
                "n": int(sel.sum()),
                "score_min": float(scores[sel].min()),
                "score_max": float(scores[sel].max()),
                "clinical_cost": float(clinical[sel].mean()),
                "expert_cost": float(expert[sel].mean()),
                "total_cost": float(clinical[sel].mean() + expert[sel].mean()),
                "defer_hard": float(out.routed[sel].mean()),
            })
    return pd.DataFrame(rows, columns=["axis", "method", "bin", "n", "score_min", "score_max", "clinical_cost",
                                       "expert_cost", "total_cost", "defer_hard"])


def _retention(out: RoutedOutcomes, cfg: CostConfig) -> Dict[str, Any]:
    n = len(out)
    correct = out.predictions == out.y
    kept = ~out.routed
    n_ai = int(kept.sum())
    n_routed = n - n_ai
    acc = float(correct.mean()) if n else None
    acc_ai = float(correct[kept].mean()) if n_ai else None
    acc_routed = float(correct[~kept].mean()) if n_routed else None
    cost_ai = float(clinical_error_costs(out.y[kept], out.predictions[kept], cfg).mean()) if n_ai else None
    residual = (n * (acc or 0.0)) - (n_ai * (acc_ai or 0.0) + n_routed * (acc_routed or 0.0))
    return {
        "n": n,
        "n_ai": n_ai,
        "n_routed": n_routed,
        "ai_share": _ratio(n_ai, n),
        "accuracy": acc,
        "ai_accuracy": acc_ai,
        "routed_accuracy": acc_routed,
        "ai_clinical_cost": cost_ai,
        "identity_residual": float(residual),
    }


def ai_retention(outcomes: RoutedOutcomes, cfg: CostConfig) -> Dict[str, Dict[str, Any]]:
    """
    Share and accuracy of AI-retained and routed cases, overall and per cohort
    """
    res = {OVERALL: _retention(outcomes, cfg)}
    for c in sorted(set(outcomes.cohort.tolist())):
        res[str(c)] = _retention(outcomes.subset(outcomes.cohort == c), cfg)
    return res


def oracle_predictions(outcomes: RoutedOutcomes) -> np.ndarray:
    """
    Correct whenever any available reader is correct; cases without readers
    keep the AI prediction
    """
    ai = (outcomes.prob >= 0.5).astype(np.int64)
    labels = outcomes.expert_labels
    avail = outcomes.mask > 0
    with np.errstate(invalid="ignore"):
        any_correct = (avail & (labels == outcomes.y[:, None])).any(axis=1)
    pred = np.where(any_correct, outcomes.y, 1 - outcomes.y)
    return np.where(avail.any(axis=1), pred, ai).astype(np.int64)


def per_expert_table(outcomes: RoutedOutcomes, cfg: CostConfig, names: Sequence[str] = None) -> pd.DataFrame:
    """
    Each expert against the router on the cases where the expert has a decision
    """
    m = outcomes.n_experts
    names = list(names) if names is not None else [f"expert_{j + 1}" for j in range(m)]
    rows = []
    for j in range(m):
        sel = outcomes.mask[:, j] > 0
        y = outcomes.y[sel]
        pred = outcomes.expert_labels[sel, j].astype(np.int64)
        block = classification_block(y, pred)
        router_pred = outcomes.predictions[sel]
        rows.append({
            "reader": names[j],
            "n": block["n"],
            "accuracy": block["accuracy"],
            "sensitivity": block["sensitivity"],
            "specificity": block["specificity"],
            "f1": block["f1"],
            "mcc": block["mcc"],
            "fn": block["fn"],
            "fp": block["fp"],
            "clinical_cost": float(clinical_error_costs(y, pred, cfg).mean()) if sel.any() else 0.0,
            "router_accuracy": classification_block(y, router_pred)["accuracy"],
            "router_clinical_cost": float(clinical_error_costs(y, router_pred, cfg).mean()) if sel.any() else 0.0,
        })
    pred = oracle_predictions(outcomes)
    block = classification_block(outcomes.y, pred)
    rows.append({
        "reader": BEST_ORACLE,
        "n": block["n"],
        "accuracy": block["accuracy"],
        "sensitivity": block["sensitivity"],
        "specificity": block["specificity"],
        "f1": block["f1"],
        "mcc": block["mcc"],
        "fn": block["fn"],
        "fp": block["fp"],
        "clinical_cost": float(clinical_error_costs(outcomes.y, pred, cfg).mean()) if len(outcomes) else 0.0,
        "router_accuracy": confusion_metrics(outcomes)["accuracy"],
        "router_clinical_cost": cost_metrics(outcomes, cfg)["clinical_cost"],
    })
    return pd.DataFrame(rows)


def budget_block(deferral: Mapping[str, Any], rho_def: float) -> Dict[str, float]:
    return {
        "target": float(rho_def),
        "violation": max(0.0, deferral["defer_soft"] - rho_def),
        "gap_soft": deferral["defer_soft"] - rho_def,
        "gap_hard": deferral["defer_hard"] - rho_def,
    }


def summarize(outcomes: RoutedOutcomes, cfg: CostConfig, kappa: Optional[Sequence[float]] = None) -> Dict[str, Any]:
    return {
        "classification": confusion_metrics(outcomes),
        "costs": cost_metrics(outcomes, cfg, kappa),
        "deferral": deferral_rates(outcomes),
    }


def evaluate_outcomes(outcomes: RoutedOutcomes, cfg: CostConfig, kappa: Optional[Sequence[float]] = None,
                      report: DiagnosticReport = None) -> Dict[str, Any]:
    """
    Full metrics block of one method: overall, per cohort, collapse,
    AI retention and budget
    """
    block = summarize(outcomes, cfg, kappa)
    block["by_cohort"] = {str(c): summarize(outcomes.subset(outcomes.cohort == c), cfg, kappa)
                          for c in sorted(set(outcomes.cohort.tolist()))}
    block["collapse"] = collapse_diagnostics(outcomes, report)
    block["ai_retention"] = ai_retention(outcomes, cfg)
    block["budget"] = budget_block(block["deferral"], cfg.rho_def)
    return block
