"""
Full training objective: mean routing loss + weighted regularisers + AL term
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from ..config import CostConfig, RouterConfig
from ..errors import NonFiniteLossError
from ..policy.policy_core import GateSample, RoutingPolicy
from ..report_model import DiagnosticReport
from ..router.features import StateBatch
from ..router.router_net import RouterParams, policy_backward, policy_forward
from .costs import clinical_costs, routing_loss, routing_loss_grad
from .lagrangian import ALState, al_penalty
from .penalties import gsdp_penalty, rank_js_penalty

logger = logging.getLogger(__name__)


@dataclass
class ObjectiveContext:
    costs: CostConfig
    kappa: np.ndarray
    al: ALState = field(default_factory=ALState)


@dataclass
class ObjectiveValue:
    total: float
    breakdown: Dict[str, float]
    grad_d: np.ndarray
    grad_q: np.ndarray
    per_sample: np.ndarray


def total_objective(policy: RoutingPolicy, batch: StateBatch, ctx: ObjectiveContext,
                    priors: Optional[np.ndarray] = None, with_al: bool = True,
                    report: DiagnosticReport = None) -> ObjectiveValue:
    """
    Evaluate the objective for fixed per-sample policies

    ``priors`` carries one prior row per sample of ``batch`` (see
    ``prior_matrix``); without it the group penalty is skipped. The AL
    term uses the batch mean of the soft defer mass.
    """
    cfg = ctx.costs
    n = len(batch)
    d, q = policy.defer_mass, policy.alloc
    costs = clinical_costs(batch, cfg)
    per_sample = routing_loss(policy, costs, cfg, ctx.kappa)
    delta, dq = routing_loss_grad(policy, costs, cfg, ctx.kappa)
    routing = float(per_sample.mean())
    grad_d = delta / n
    grad_q = dq / n

    gsdp_value = 0.0
    if priors is not None:
        pv = gsdp_penalty(d, q, batch.group, priors, report=report)
        gsdp_value = pv.value
        if cfg.w_gsdp > 0:
            grad_d = grad_d + cfg.w_gsdp * pv.grad_d
            grad_q = grad_q + cfg.w_gsdp * pv.grad_q

    rv = rank_js_penalty(d, q, batch.mask, varrho=cfg.rank_varrho, margin=cfg.rank_margin)
    if cfg.w_rank > 0:
        grad_d = grad_d + cfg.w_rank * rv.grad_d
        grad_q = grad_q + cfg.w_rank * rv.grad_q

    d_bar = float(d.mean())
    al_value = 0.0
    if with_al:
        al_value, slope = al_penalty(d_bar, ctx.al.lambda_def, cfg.rho_def, cfg.mu)
        grad_d = grad_d + slope / n

    total = routing + cfg.w_gsdp * gsdp_value + cfg.w_rank * rv.value + al_value
    breakdown = {"routing": routing, "gsdp": gsdp_value, "rank": rv.value, "al": al_value,
                 "d_bar": d_bar, "lambda_def": ctx.al.lambda_def, "rank_active": rv.details.get("active", 0),
                 "total": total}
    if not np.isfinite(total):
        bad = [batch.ids[i] for i in np.flatnonzero(~np.isfinite(per_sample))]
        raise NonFiniteLossError(f"non-finite objective {breakdown}", sample_ids=bad or list(batch.ids))
    return ObjectiveValue(total=total, breakdown=breakdown, grad_d=grad_d, grad_q=grad_q, per_sample=per_sample)


def forward_objective(params: RouterParams, batch: StateBatch, ctx: ObjectiveContext, router_cfg: RouterConfig,
                      priors: Optional[np.ndarray] = None, noise: Optional[np.ndarray] = None,
                      frozen_gate: Optional[GateSample] = None, with_al: bool = True,
                      report: DiagnosticReport = None):
    """
    Router forward pass followed by the objective; returns (value, trace)
    """
    trace = policy_forward(batch, params, tau_g=router_cfg.tau_g, tau_a=router_cfg.tau_a, noise=noise,
                           frozen_gate=frozen_gate, clamp=router_cfg.logit_clamp)
    value = total_objective(trace.policy, batch, ctx, priors=priors, with_al=with_al, report=report)
    return value, trace


def objective_gradients(params: RouterParams, batch: StateBatch, ctx: ObjectiveContext, router_cfg: RouterConfig,
                        priors: Optional[np.ndarray] = None, noise: Optional[np.ndarray] = None,
                        frozen_gate: Optional[GateSample] = None, with_al: bool = True,
                        report: DiagnosticReport = None):
    """
    Returns (value, trace, parameter gradients)
    """
    value, trace = forward_objective(params, batch, ctx, router_cfg, priors=priors, noise=noise,
                                     frozen_gate=frozen_gate, with_al=with_al, report=report)
    grads = policy_backward(trace, params, value.grad_d, value.grad_q)
    return value, trace, grads


def make_context(costs: CostConfig, n_experts: int, al: Optional[ALState] = None,
                 kappa: Optional[Sequence[float]] = None) -> ObjectiveContext:
    k = np.asarray(kappa if kappa is not None else costs.tier_costs(n_experts), dtype=np.float64)
    return ObjectiveContext(costs=costs, kappa=k, al=al or ALState(lambda_def=costs.lambda_init))
