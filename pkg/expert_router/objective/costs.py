"""
Asymmetric clinical costs and the per-sample routing loss
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..cohort.cohort_table import DecisionState
from ..config import CostConfig
from ..errors import ContractViolationError
from ..policy.policy_core import RoutingPolicy
from ..router.features import StateBatch

logger = logging.getLogger(__name__)


@dataclass
class ClinicalCosts:
    """
    C_ai per case and C_exp per (case, expert); C_exp is NaN where the
    expert has no decision
    """
    ai: np.ndarray
    expert: np.ndarray
    mask: np.ndarray

    def expert_cost(self, j: int, i: Optional[int] = None) -> float:
        m = self.mask if i is None else self.mask[i]
        c = self.expert if i is None else self.expert[i]
        if m[j] <= 0:
            raise ContractViolationError(f"expert {j} has no decision for this case")
        return float(c[j])

    def filled(self) -> np.ndarray:
        """C_exp with zeros at infeasible entries"""
        return np.where(self.mask > 0, self.expert, 0.0)


def clinical_costs(state: Union[DecisionState, StateBatch], cfg: CostConfig) -> ClinicalCosts:
    if isinstance(state, DecisionState):
        y = np.float64(state.label)
        p = np.float64(state.prob_1)
        labels = state.expert_labels
        mask = state.mask.as_float()
    else:
        y, p, labels, mask = state.y, state.prob, state.expert_labels, state.mask
    c_ai = cfg.c_fn * y * (1.0 - p) + cfg.c_fp * (1.0 - y) * p
    yy = np.asarray(y)[..., None] if np.ndim(y) else y
    with np.errstate(invalid="ignore"):
        miss = (yy == 1) & (labels == 0)
        false_ref = (yy == 0) & (labels == 1)
    c_exp = cfg.c_fn * miss + cfg.c_fp * false_ref
    c_exp = np.where(mask > 0, c_exp.astype(np.float64), np.nan)
    return ClinicalCosts(ai=np.asarray(c_ai, dtype=np.float64), expert=c_exp, mask=mask)


def expert_action_costs(costs: ClinicalCosts, kappa: Sequence[float], gamma_tier: float) -> np.ndarray:
    """C_exp + gamma * kappa on feasible entries, 0 elsewhere"""
    k = np.asarray(kappa, dtype=np.float64)
    return np.where(costs.mask > 0, costs.filled() + gamma_tier * k, 0.0)


def marginal_cost(q: np.ndarray, costs: ClinicalCosts, kappa: Sequence[float], gamma_tier: float) -> np.ndarray:
    """Delta(q): expected expert-side cost minus C_ai"""
    e = expert_action_costs(costs, kappa, gamma_tier)
    return (np.asarray(q) * e).sum(axis=-1) - costs.ai


def routing_loss(policy: RoutingPolicy, costs: ClinicalCosts, cfg: CostConfig,
                 kappa: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    L_i = C_ai + d_i * Delta_i(q_i), per case
    """
    if kappa is None:
        kappa = cfg.tier_costs(costs.mask.shape[-1])
    return costs.ai + policy.defer_mass * marginal_cost(policy.alloc, costs, kappa, cfg.gamma_tier)


def routing_loss_grad(policy: RoutingPolicy, costs: ClinicalCosts, cfg: CostConfig,
                      kappa: Sequence[float]):
    """
    (dL_i/dd_i, dL_i/dq_i) for each case
    """
    e = expert_action_costs(costs, kappa, cfg.gamma_tier)
    delta = (policy.alloc * e).sum(axis=-1) - costs.ai
    return delta, policy.defer_mass[..., None] * e
