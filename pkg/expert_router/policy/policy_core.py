"""
Building blocks of the mask-aware dual-head routing policy

All functions accept arrays whose trailing axis indexes experts (length M) or
actions (length M + 1, action 0 being the AI); leading axes are treated as a
batch. Masked entries come out as exact zeros.
"""
from dataclasses import dataclass
from typing import Optional, Union

import logging
import numpy as np
from scipy.special import expit

from ..errors import (DegeneratePolicyError, DegenerateSupportError,
                      EmptyFeasibleSetError, RejectedInputError)

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
SUPPORT_EPS = 1e-8

ARRAY = np.ndarray


@dataclass
class ExpertMask:
    """
    Binary availability of each expert for one case (or a batch of cases)
    """
    bits: ARRAY

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError(f"mask entries must be 0 or 1: {bits}")
        self.bits = bits.astype(np.int8)

    @property
    def k(self) -> Union[int, ARRAY]:
        k = self.bits.sum(axis=-1)
        return int(k) if np.ndim(k) == 0 else k

    @property
    def feasible(self) -> ARRAY:
        """Indices of available experts (single case)"""
        return np.flatnonzero(self.bits)

    def as_float(self) -> ARRAY:
        return self.bits.astype(np.float64)


MASK = Union[ExpertMask, ARRAY]


def as_mask_array(mask: MASK) -> ARRAY:
    if isinstance(mask, ExpertMask):
        return mask.as_float()
    return np.asarray(mask, dtype=np.float64)


@dataclass
class GateSample:
    hard: ARRAY
    soft: ARRAY
    st: ARRAY
    noise: ARRAY

    def soft_grad(self, tau_g: float) -> ARRAY:
        """d soft / d gamma; zero on masked experts since soft is exactly 0 there"""
        return self.soft * (1.0 - self.soft) / tau_g


@dataclass
class AllocationDist:
    probs: ARRAY


@dataclass
class RoutingPolicy:
    defer_mass: ARRAY
    alloc: ARRAY
    action_probs: ARRAY


def draw_logistic(rng: np.random.Generator, shape) -> ARRAY:
    """
    Logistic(0, 1) draws via log U - log(1 - U)
    """
    return logistic_from_uniform(rng.random(shape))


def logistic_from_uniform(u: ARRAY) -> ARRAY:
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(u) - np.log1p(-u)


def gumbel_sigmoid_gate(gamma: ARRAY, mask: MASK, tau_g: float,
                        rng: Optional[np.random.Generator] = None,
                        noise: Optional[ARRAY] = None,
                        clamp: float = LOGIT_CLAMP) -> GateSample:
    """
    Masked Binary Concrete gate

    The hard gate is 1[gamma_bar + eta >= 0] and the relaxed gate is
    sigmoid((gamma_bar + eta) / tau_g) where gamma_bar is -inf on masked
    experts. When neither ``noise`` nor ``rng`` is given the noise is zero and
    the gate returns the Bernoulli mode.
    """
    if tau_g <= 0:
        raise ValueError(f"tau_g must be positive, got {tau_g}")
    gamma = np.asarray(gamma, dtype=np.float64)
    if not np.all(np.isfinite(gamma)):
        raise RejectedInputError(f"non-finite gating logits: {gamma}")
    m = as_mask_array(mask)
    if noise is None:
        noise = draw_logistic(rng, gamma.shape) if rng is not None else np.zeros_like(gamma)
    noise = np.asarray(noise, dtype=np.float64)
    feasible = m > 0
    logits = np.clip(gamma, -clamp, clamp) + noise
    hard = np.where(feasible & (logits >= 0), 1.0, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        soft = np.where(feasible, expit(logits / tau_g), 0.0)
    return GateSample(hard=hard, soft=soft, st=hard.copy(), noise=noise)


def straight_through(hard: ARRAY, soft: ARRAY, anchor: ARRAY) -> ARRAY:
    """
    hard - sg(soft) + soft, with ``anchor`` standing in for the stop-gradient copy
    """
    return hard - anchor + soft


def repair_support(hard: ARRAY, mask: MASK) -> ARRAY:
    """
    Fall back to the full feasible mask when no expert was selected
    """
    hard = np.asarray(hard, dtype=np.float64)
    m = as_mask_array(mask)
    empty = hard.sum(axis=-1, keepdims=True) <= 0
    return np.where(empty, m, hard)


def masked_allocation(beta: ARRAY, mask: MASK, tau_a: float) -> AllocationDist:
    """
    Softmax of beta / tau_a restricted to the feasible experts
    """
    if tau_a <= 0:
        raise ValueError(f"tau_a must be positive, got {tau_a}")
    beta = np.asarray(beta, dtype=np.float64)
    m = as_mask_array(mask)
    feasible = m > 0
    if np.any(feasible.sum(axis=-1) == 0):
        raise EmptyFeasibleSetError("masked allocation needs at least one feasible expert")
    z = np.where(feasible, beta / tau_a, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(feasible, np.exp(z), 0.0)
    return AllocationDist(probs=e / e.sum(axis=-1, keepdims=True))


def conditional_allocation(alloc: Union[AllocationDist, ARRAY], support: ARRAY,
                           eps: float = SUPPORT_EPS) -> ARRAY:
    """
    Renormalised restriction of the allocation to the (repaired) support
    """
    a = alloc.probs if isinstance(alloc, AllocationDist) else np.asarray(alloc, dtype=np.float64)
    weighted = a * np.asarray(support, dtype=np.float64)
    denom = weighted.sum(axis=-1, keepdims=True)
    if np.any(denom <= eps):
        raise DegenerateSupportError(f"allocation mass on the selected support is below {eps}")
    return weighted / denom


def assemble_policy(defer_logit: ARRAY, q: ARRAY, mask: MASK,
                    clamp: float = LOGIT_CLAMP) -> RoutingPolicy:
    """
    pi = (1 - d, d q) with d forced to 0 when no expert is available
    """
    q = np.asarray(q, dtype=np.float64)
    m = as_mask_array(mask)
    k = m.sum(axis=-1)
    d = np.where(k > 0, expit(np.clip(np.asarray(defer_logit, dtype=np.float64), -clamp, clamp)), 0.0)
    q = np.where(m > 0, q, 0.0)
    probs = np.concatenate([(1.0 - d)[..., None], d[..., None] * q], axis=-1)
    return RoutingPolicy(defer_mass=d, alloc=q, action_probs=probs)


def action_mask(mask: MASK) -> ARRAY:
    """
    [1, m_1, ..., m_M]: the AI action is always feasible
    """
    m = as_mask_array(mask)
    return np.concatenate([np.ones(m.shape[:-1] + (1,)), m], axis=-1)


def project_masked_simplex(v: ARRAY, act_mask: ARRAY) -> ARRAY:
    w = np.asarray(v, dtype=np.float64) * np.asarray(act_mask, dtype=np.float64)
    total = w.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegeneratePolicyError("no feasible probability mass to project")
    return w / total


def hard_action(policy: Union[RoutingPolicy, ARRAY], act_mask: Optional[ARRAY] = None) -> Union[int, ARRAY]:
    """
    Masked argmax over actions; ties go to the AI, then to the lowest expert index
    """
    probs = policy.action_probs if isinstance(policy, RoutingPolicy) else np.asarray(policy, dtype=np.float64)
    if act_mask is not None:
        probs = np.where(np.asarray(act_mask) > 0, probs, -np.inf)
    # np.argmax returns the first maximiser
    a = np.argmax(probs, axis=-1)
    return int(a) if np.ndim(a) == 0 else a
