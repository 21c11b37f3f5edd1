"""
Load-shaping regularisers acting on the deferred mass

Both penalties return their value together with gradients w.r.t. the
per-sample defer mass d (B,) and conditional allocation q (B, M). Entries
with zero mass contribute no gradient (0 log 0 = 0 held flat). That
convention leaves a kink at q = 0, where the derivative of q log q is
unbounded; finite differences only match the returned gradients while
every feasible entry of q stays positive.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..report_model import Category, DiagnosticReport

logger = logging.getLogger(__name__)

PRIOR_FLOOR = 1e-12


@dataclass
class PenaltyValue:
    value: float
    grad_d: np.ndarray
    grad_q: np.ndarray
    details: Dict = field(default_factory=dict)


def _zero(d: np.ndarray, q: np.ndarray, **details) -> PenaltyValue:
    return PenaltyValue(value=0.0, grad_d=np.zeros_like(d), grad_q=np.zeros_like(q), details=details)


def kl_divergence(p: np.ndarray, q: np.ndarray, floor: float = PRIOR_FLOOR) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pos = p > 0
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(np.maximum(q[pos], floor)))))


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mid = 0.5 * (np.asarray(p, dtype=np.float64) + np.asarray(q, dtype=np.float64))
    return 0.5 * kl_divergence(p, mid) + 0.5 * kl_divergence(q, mid)


def gsdp_penalty(d: np.ndarray, q: np.ndarray, group: np.ndarray, priors: np.ndarray,
                 report: DiagnosticReport = None) -> PenaltyValue:
    """
    Deferred-load-weighted KL between each group's deferred allocation and
    its prior

    ``priors`` holds one prior row per sample (rows of a group are
    identical); a row of NaN marks a sample whose group prior is undefined,
    which keeps it in D_+ but out of every group term.

    With D_g = sum_{i in g} d_i and Q_gj = sum_{i in g} d_i q_ij the value is
    sum_g Q_g . log(Q_g / (D_g p_g)) / D_+, i.e.
    sum_g (D_g / D_+) KL(q~_g || p_g).
    """
    d = np.asarray(d, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d_plus = d.sum()
    if d_plus <= 0:
        return _zero(d, q, d_plus=0.0, groups={})
    grad_d = np.zeros_like(d)
    grad_q = np.zeros_like(q)
    total = 0.0
    per_group = {}
    floored = 0
    for g in np.unique(group):
        rows = np.flatnonzero(group == g)
        p = priors[rows[0]]
        if np.any(np.isnan(p)):
            continue
        d_g = d[rows].sum()
        if d_g <= 0:
            continue
        load = (d[rows, None] * q[rows]).sum(axis=0)
        q_tilde = load / d_g
        pos = load > 0
        floored += int(np.sum(pos & (p < PRIOR_FLOOR)))
        ell = np.zeros_like(load)
        ell[pos] = np.log(q_tilde[pos]) - np.log(np.maximum(p[pos], PRIOR_FLOOR))
        f_g = float(np.sum(load[pos] * ell[pos]))
        total += f_g
        slope = np.where(pos, ell + 1.0, 0.0)
        grad_q[rows] = d[rows, None] * slope[None, :]
        grad_d[rows] = (q[rows] * slope[None, :]).sum(axis=1) - q_tilde.sum()
        per_group[int(g)] = {"D_g": float(d_g), "kl": f_g / d_g}
    if floored and report is not None:
        report.add_message(f'Prior floor {PRIOR_FLOOR} applied on {floored} group entries',
                           category=Category.PriorFloor)
    value = total / d_plus
    grad_d = (grad_d - value) / d_plus
    grad_q = grad_q / d_plus
    return PenaltyValue(value=value, grad_d=grad_d, grad_q=grad_q, details={"d_plus": float(d_plus),
                                                                           "groups": per_group})


def geometric_reference(k: int, varrho: float) -> np.ndarray:
    """
    g(t) = (1 - varrho) varrho^(t-1) / (1 - varrho^k), t = 1..k
    """
    if not 0 < varrho < 1:
        raise ValueError(f"varrho must lie in (0, 1), got {varrho}")
    t = np.arange(k)
    return (1.0 - varrho) * varrho ** t / (1.0 - varrho ** k)


def majorization_excess(r: np.ndarray, g: np.ndarray) -> float:
    """max_t (R(t) - G(t)) over prefix sums of the sorted profile and reference"""
    return float(np.max(np.cumsum(r) - np.cumsum(g)))


def rank_activation(r: np.ndarray, g: np.ndarray, margin: float) -> bool:
    return majorization_excess(r, g) > margin


def rank_js_penalty(d: np.ndarray, q: np.ndarray, mask: np.ndarray, varrho: float = 0.5,
                    margin: float = 0.05) -> PenaltyValue:
    """
    sum_i d_i chi_i JS(r_i || g_{k_i}) / D_+

    r_i is q_i over the feasible experts sorted in decreasing order and
    chi_i fires when the cumulative top-rank mass of r_i exceeds the
    truncated geometric reference by more than ``margin``. The sort is
    treated as a fixed permutation for differentiation.
    """
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    d = np.asarray(d, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d_plus = d.sum()
    if d_plus <= 0:
        return _zero(d, q, d_plus=0.0, active=0)
    n, m = q.shape
    js = np.zeros(n)
    chi = np.zeros(n)
    slope = np.zeros_like(q)
    for i in range(n):
        feasible = np.flatnonzero(mask[i] > 0)
        k = len(feasible)
        if k == 0:
            continue
        order = feasible[np.argsort(-q[i, feasible], kind="mergesort")]
        r = q[i, order]
        g = geometric_reference(k, varrho)
        if not rank_activation(r, g, margin):
            continue
        chi[i] = 1.0
        js[i] = js_divergence(r, g)
        mid = 0.5 * (r + g)
        pos = r > 0
        s = np.zeros(k)
        s[pos] = 0.5 * np.log(r[pos] / mid[pos])
        slope[i, order] = s
    value = float(np.sum(d * chi * js) / d_plus)
    grad_d = (chi * js - value) / d_plus
    grad_q = (d * chi)[:, None] * slope / d_plus
    return PenaltyValue(value=value, grad_d=grad_d, grad_q=grad_q,
                        details={"d_plus": float(d_plus), "active": int(chi.sum()), "chi": chi, "js": js})
