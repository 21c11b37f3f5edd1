"""
The trainable router: branch encoders, fusion, defer head, shared trunk,
gating / allocation heads and the structural scalar head

Forward and reverse passes are written out explicitly for this fixed
architecture and run at float64 over a batch of states.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from ..config import RouterConfig
from ..policy.policy_core import (LOGIT_CLAMP, GateSample, RoutingPolicy, action_mask,
                                  assemble_policy, conditional_allocation, gumbel_sigmoid_gate,
                                  masked_allocation, project_masked_simplex, straight_through)
from .features import StateBatch

logger = logging.getLogger(__name__)


@dataclass
class RouterParams:
    """
    Named parameter arrays with a flat-vector view
    """
    arrays: "OrderedDict[str, np.ndarray]"

    @property
    def names(self):
        return list(self.arrays.keys())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    @property
    def n_experts(self) -> int:
        return self.arrays["gate_b"].shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def unflatten(self, vec: np.ndarray) -> 'RouterParams':
        out = OrderedDict()
        offset = 0
        for name, a in self.arrays.items():
            out[name] = np.asarray(vec[offset:offset + a.size], dtype=np.float64).reshape(a.shape).copy()
            offset += a.size
        return RouterParams(out)

    def copy(self) -> 'RouterParams':
        return RouterParams(OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def param_shapes(n_experts: int, cfg: RouterConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    hb, hf, ht = cfg.hidden_branch, cfg.hidden_fuse, cfg.hidden_trunk
    return OrderedDict([
        ("risk_W", (3, hb)), ("risk_b", (hb,)),
        ("str_W", (2, hb)), ("str_b", (hb,)),
        ("ai_W", (2, hb)), ("ai_b", (hb,)),
        ("fuse_W", (3 * hb, hf)), ("fuse_b", (hf,)),
        ("defer_w", (hf,)), ("defer_b", (1,)),
        ("trunk_W", (hf, ht)), ("trunk_b", (ht,)),
        ("gate_W", (ht, n_experts)), ("gate_b", (n_experts,)),
        ("alloc_W", (ht, n_experts)), ("alloc_b", (n_experts,)),
        ("struct_w", (2,)), ("struct_b", (1,)),
    ])


def init_params(n_experts: int, cfg: RouterConfig, rng: np.random.Generator) -> RouterParams:
    """
    Uniform fan-in initialisation for weights, zero biases
    """
    arrays = OrderedDict()
    for name, shape in param_shapes(n_experts, cfg).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return RouterParams(arrays)


@dataclass
class ForwardTrace:
    batch: StateBatch
    p_str: np.ndarray
    r_risk: np.ndarray
    r_str: np.ndarray
    h_risk: np.ndarray
    h_str: np.ndarray
    h_ai: np.ndarray
    h: np.ndarray
    z: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    defer_logit: np.ndarray
    gate: GateSample
    support: np.ndarray
    repaired: np.ndarray
    alloc: np.ndarray
    support_mass: np.ndarray
    policy: RoutingPolicy
    tau_g: float
    tau_a: float
    clamp: float

    @property
    def defer_mass(self) -> np.ndarray:
        return self.policy.defer_mass

    @property
    def q(self) -> np.ndarray:
        return self.policy.alloc


def build_router_state(batch: StateBatch, params: RouterParams):
    """
    Risk vector and structural feature vector of each state

    Returns (r_risk, r_str, p_str).
    """
    p_str = expit(batch.struct @ params["struct_w"] + params["struct_b"][0])
    r_str = np.stack([2.0 * p_str - 1.0, np.abs(batch.prob - p_str)], axis=1)
    return batch.risk, r_str, p_str


def policy_forward(batch: StateBatch, params: RouterParams, tau_g: float = 1.0, tau_a: float = 1.0,
                   noise: Optional[np.ndarray] = None, frozen_gate: Optional[GateSample] = None,
                   clamp: float = LOGIT_CLAMP) -> ForwardTrace:
    """
    Encoders -> fusion -> defer head and trunk -> gate / allocation -> policy

    ``noise`` holds the logistic draws per (state, expert); None gives the
    deterministic mode gate used at inference. ``frozen_gate`` pins the
    hard gate and the stop-gradient copy of the relaxed gate to a previous
    pass (finite-difference checks).
    """
    if frozen_gate is not None:
        noise = frozen_gate.noise
    r_risk, r_str, p_str = build_router_state(batch, params)
    h_risk = np.tanh(r_risk @ params["risk_W"] + params["risk_b"])
    h_str = np.tanh(r_str @ params["str_W"] + params["str_b"])
    h_ai = np.tanh(batch.logits @ params["ai_W"] + params["ai_b"])
    h = np.tanh(np.concatenate([h_risk, h_str, h_ai], axis=1) @ params["fuse_W"] + params["fuse_b"])
    defer_logit = h @ params["defer_w"] + params["defer_b"][0]
    z = np.tanh(h @ params["trunk_W"] + params["trunk_b"])
    gamma = z @ params["gate_W"] + params["gate_b"]
    beta = z @ params["alloc_W"] + params["alloc_b"]

    mask = batch.mask
    gate = gumbel_sigmoid_gate(gamma, mask, tau_g, noise=noise, clamp=clamp)
    if frozen_gate is not None:
        hard, anchor = frozen_gate.hard, frozen_gate.soft
    else:
        hard, anchor = gate.hard, gate.soft
    st = straight_through(hard, gate.soft, anchor)
    gate = GateSample(hard=hard, soft=gate.soft, st=st, noise=gate.noise)

    active = mask.sum(axis=1) > 0
    repaired = active & (hard.sum(axis=1) <= 0)
    support = np.where(repaired[:, None], mask, st)
    alloc = np.zeros_like(mask)
    q = np.zeros_like(mask)
    support_mass = np.ones(len(mask))
    if np.any(active):
        a = masked_allocation(beta[active], mask[active], tau_a).probs
        alloc[active] = a
        q[active] = conditional_allocation(a, support[active])
        support_mass[active] = (a * support[active]).sum(axis=1)
    policy = assemble_policy(defer_logit, q, mask, clamp=clamp)
    policy.action_probs = project_masked_simplex(policy.action_probs, action_mask(mask))
    return ForwardTrace(batch=batch, p_str=p_str, r_risk=r_risk, r_str=r_str, h_risk=h_risk, h_str=h_str,
                        h_ai=h_ai, h=h, z=z, gamma=gamma, beta=beta, defer_logit=defer_logit, gate=gate,
                        support=support, repaired=repaired, alloc=alloc, support_mass=support_mass,
                        policy=policy, tau_g=tau_g, tau_a=tau_a, clamp=clamp)


def policy_backward(trace: ForwardTrace, params: RouterParams, grad_d: np.ndarray,
                    grad_q: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Reverse pass from dJ/dd and dJ/dq to every router parameter

    The gate gradient follows the straight-through path and is dropped on
    rows where the empty-support repair fired.
    """
    b = trace.batch
    d, q, a, s = trace.defer_mass, trace.q, trace.alloc, trace.support
    active = b.mask.sum(axis=1) > 0

    # conditional allocation q = a*s / <a, s>
    centred = grad_q - (grad_q * q).sum(axis=1, keepdims=True)
    scale = np.where(active, 1.0 / trace.support_mass, 0.0)[:, None]
    g_a = s * centred * scale
    g_s = a * centred * scale
    g_soft = np.where(trace.repaired[:, None], 0.0, g_s)
    g_gamma = g_soft * trace.gate.soft_grad(trace.tau_g) * (np.abs(trace.gamma) < trace.clamp)
    g_beta = a * (g_a - (g_a * a).sum(axis=1, keepdims=True)) / trace.tau_a
    g_dlogit = grad_d * d * (1.0 - d) * (np.abs(trace.defer_logit) < trace.clamp)

    grads = {}
    grads["gate_W"] = trace.z.T @ g_gamma
    grads["gate_b"] = g_gamma.sum(axis=0)
    grads["alloc_W"] = trace.z.T @ g_beta
    grads["alloc_b"] = g_beta.sum(axis=0)
    g_z = g_gamma @ params["gate_W"].T + g_beta @ params["alloc_W"].T
    g_zpre = g_z * (1.0 - trace.z ** 2)
    grads["trunk_W"] = trace.h.T @ g_zpre
    grads["trunk_b"] = g_zpre.sum(axis=0)
    grads["defer_w"] = trace.h.T @ g_dlogit
    grads["defer_b"] = np.array([g_dlogit.sum()])
    g_h = g_zpre @ params["trunk_W"].T + np.outer(g_dlogit, params["defer_w"])
    g_hpre = g_h * (1.0 - trace.h ** 2)
    cat = np.concatenate([trace.h_risk, trace.h_str, trace.h_ai], axis=1)
    grads["fuse_W"] = cat.T @ g_hpre
    grads["fuse_b"] = g_hpre.sum(axis=0)
    g_cat = g_hpre @ params["fuse_W"].T
    hb = trace.h_risk.shape[1]
    branches = (("risk", trace.r_risk, trace.h_risk), ("str", trace.r_str, trace.h_str),
                ("ai", b.logits, trace.h_ai))
    g_rstr = None
    for k, (name, x, hx) in enumerate(branches):
        g_pre = g_cat[:, k * hb:(k + 1) * hb] * (1.0 - hx ** 2)
        grads[f"{name}_W"] = x.T @ g_pre
        grads[f"{name}_b"] = g_pre.sum(axis=0)
        if name == "str":
            g_rstr = g_pre @ params["str_W"].T
    p = trace.p_str
    g_p = 2.0 * g_rstr[:, 0] - np.sign(b.prob - p) * g_rstr[:, 1]
    g_sp = g_p * p * (1.0 - p)
    grads["struct_w"] = b.struct.T @ g_sp
    grads["struct_b"] = np.array([g_sp.sum()])
    return OrderedDict((name, grads[name]) for name in params.names)
