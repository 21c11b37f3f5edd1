"""
Hard-routed outcomes of a policy on a set of cases, plus the reference
policies reported next to the router
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from ..errors import ContractViolationError
from ..policy.policy_core import action_mask, hard_action
from ..router.features import StateBatch

logger = logging.getLogger(__name__)

AI_ONLY = "ai_only"
UNIFORM_RANDOM = "uniform_random_defer"
ROUTER = "router"


@dataclass
class RoutedOutcomes:
    """
    Per-case hard action (0 = AI, j = expert j - 1), final prediction and soft policy
    """
    method: str
    actions: np.ndarray
    predictions: np.ndarray
    policy: np.ndarray
    y: np.ndarray
    prob: np.ndarray
    mask: np.ndarray
    expert_labels: np.ndarray
    cohort: np.ndarray
    features: Dict[str, np.ndarray] = field(default_factory=dict)
    ids: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    @property
    def n_experts(self) -> int:
        return self.mask.shape[1]

    @property
    def defer_mass(self) -> np.ndarray:
        return np.clip(1.0 - self.policy[:, 0], 0.0, 1.0)

    @property
    def routed(self) -> np.ndarray:
        return self.actions != 0

    def subset(self, rows) -> 'RoutedOutcomes':
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return RoutedOutcomes(method=self.method, actions=self.actions[rows], predictions=self.predictions[rows],
                              policy=self.policy[rows], y=self.y[rows], prob=self.prob[rows], mask=self.mask[rows],
                              expert_labels=self.expert_labels[rows], cohort=self.cohort[rows],
                              features={k: v[rows] for k, v in self.features.items()},
                              ids=[self.ids[i] for i in rows] if self.ids else [])


def final_predictions(actions: np.ndarray, prob: np.ndarray, expert_labels: np.ndarray,
                      threshold: float = 0.5) -> np.ndarray:
    ai = (prob >= threshold).astype(np.int64)
    pred = ai.copy()
    routed = np.flatnonzero(actions != 0)
    chosen = expert_labels[routed, actions[routed] - 1]
    if np.any(np.isnan(chosen)):
        raise ContractViolationError("hard action selected an expert without a decision")
    pred[routed] = chosen.astype(np.int64)
    return pred


def route_outcomes(policy: np.ndarray, batch: StateBatch, cohort, features: Dict[str, np.ndarray] = None,
                   method: str = ROUTER, threshold: float = 0.5, actions: np.ndarray = None) -> RoutedOutcomes:
    """
    Convert soft policies to hard actions by masked argmax (AI wins ties)
    """
    policy = np.asarray(policy, dtype=np.float64)
    if actions is None:
        actions = np.asarray(hard_action(policy, action_mask(batch.mask)), dtype=np.int64).reshape(-1)
    preds = final_predictions(actions, batch.prob, batch.expert_labels, threshold)
    return RoutedOutcomes(method=method, actions=actions, predictions=preds, policy=policy, y=batch.y.astype(np.int64),
                          prob=batch.prob, mask=batch.mask, expert_labels=batch.expert_labels,
                          cohort=np.asarray(cohort), features=dict(features or {}), ids=list(batch.ids))


def ai_only_outcomes(batch: StateBatch, cohort, features: Dict[str, np.ndarray] = None,
                     threshold: float = 0.5) -> RoutedOutcomes:
    n, m = batch.mask.shape
    policy = np.zeros((n, m + 1))
    policy[:, 0] = 1.0
    return route_outcomes(policy, batch, cohort, features, method=AI_ONLY, threshold=threshold,
                          actions=np.zeros(n, dtype=np.int64))


def uniform_random_outcomes(batch: StateBatch, cohort, rate: float, rng: np.random.Generator,
                            features: Dict[str, np.ndarray] = None, threshold: float = 0.5) -> RoutedOutcomes:
    """
    Defer at ``rate`` (a fraction of all cases) to a uniformly chosen
    feasible expert; cases without experts stay with the AI
    """
    n, m = batch.mask.shape
    k = batch.mask.sum(axis=1)
    eligible = k > 0
    p_defer = min(1.0, rate * n / eligible.sum()) if eligible.any() else 0.0
    policy = np.zeros((n, m + 1))
    policy[:, 0] = 1.0
    actions = np.zeros(n, dtype=np.int64)
    for i in np.flatnonzero(eligible):
        policy[i, 0] = 1.0 - p_defer
        policy[i, 1:] = p_defer * batch.mask[i] / k[i]
        if rng.random() < p_defer:
            actions[i] = 1 + int(rng.choice(np.flatnonzero(batch.mask[i] > 0)))
    return route_outcomes(policy, batch, cohort, features, method=UNIFORM_RANDOM, threshold=threshold,
                          actions=actions)
