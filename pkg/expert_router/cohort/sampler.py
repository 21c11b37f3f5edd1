"""
Exact sampling of expert correctness under a minimum-panel-quality constraint

The number of correct experts K = sum_j c_j with c_j ~ Bernoulli(Phi_j)
is Poisson-binomial. Conditioning on K >= k_min is done exactly with a
suffix dynamic program.
"""
import logging

import numpy as np

from ..errors import InfeasibleConstraintError

logger = logging.getLogger(__name__)

Z_FLOOR = 1e-300


def suffix_table(phi: np.ndarray) -> np.ndarray:
    """
    q[j, s] = P(sum_{t >= j} c_t = s), shape (J + 1, J + 1); q[J, 0] = 1
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = len(phi)
    q = np.zeros((n + 1, n + 1))
    q[n, 0] = 1.0
    for j in range(n - 1, -1, -1):
        q[j] = (1.0 - phi[j]) * q[j + 1]
        q[j, 1:] += phi[j] * q[j + 1, :-1]
    return q


def poisson_binomial_pmf(phi: np.ndarray) -> np.ndarray:
    return suffix_table(phi)[0]


def conditional_correctness_sampler(phi: np.ndarray, k_min: int, rng: np.random.Generator) -> np.ndarray:
    """
    One draw of c in {0,1}^J from the law of independent Bernoulli(Phi_j)
    conditioned on sum(c) >= k_min
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = len(phi)
    q = suffix_table(phi)
    k_min = max(int(k_min), 0)
    tail = q[0, k_min:]
    z = tail.sum()
    if k_min > n or z < Z_FLOOR:
        raise InfeasibleConstraintError(f"P(K >= {k_min}) is numerically zero for Phi={phi}")
    k = k_min + int(rng.choice(len(tail), p=tail / z))
    c = np.zeros(n, dtype=np.int8)
    r = k
    for j in range(n):
        if r == 0:
            break
        p1 = phi[j] * q[j + 1, r - 1] / q[j, r]
        if rng.random() < p1:
            c[j] = 1
            r -= 1
    return c


def instantiate_expert_labels(y: int, correctness: np.ndarray) -> np.ndarray:
    """y_hat_j = y where c_j = 1, 1 - y otherwise"""
    c = np.asarray(correctness)
    return np.where(c == 1, y, 1 - y).astype(np.int8)
