"""
Per-expert evidence models and case-specific operating points

Each simulated expert maps geometry to a glaucoma evidence score with a
logistic model, calibrates it by temperature scaling and shifts its
baseline sensitivity / specificity with that evidence and with the
geometry-only difficulty of the case.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit, logit

from ..errors import DataError
from ..report_model import Category, DiagnosticReport

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
RIDGE_FALLBACK = 1e-4
SEPARATION_NORM = 30.0
LOG_T_BOUNDS = (-2.5, 2.5)
TEMPERATURE_TOL = 1e-5


@dataclass
class EvidenceFit:
    w: np.ndarray
    iterations: int
    converged: bool
    ridge: float = 0.0


@dataclass
class TemperatureFit:
    T: float
    nll: float
    at_boundary: bool = False


@dataclass
class ExpertProfile:
    """
    Evidence weights, temperature, baseline operating point and modulation gains
    """
    name: str
    w: np.ndarray
    T: float
    se: float
    sp: float
    alpha: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError(f"{self.name}: temperature must be positive")
        if not (0 < self.se < 1 and 0 < self.sp < 1):
            raise ValueError(f"{self.name}: Se/Sp must lie in (0, 1)")

    def score(self, phi: np.ndarray) -> np.ndarray:
        return np.asarray(phi) @ self.w

    def calibrated(self, phi: np.ndarray) -> np.ndarray:
        return expit(self.score(phi) / self.T)


def _nll(phi, y, w, ridge):
    s = phi @ w
    return float(np.sum(np.logaddexp(0.0, s) - y * s) + 0.5 * ridge * w @ w)


def _newton(phi, y, ridge):
    n, p = phi.shape
    w = np.zeros(p)
    for it in range(1, NEWTON_MAX_ITER + 1):
        mu = expit(phi @ w)
        grad = phi.T @ (mu - y) + ridge * w
        if np.max(np.abs(grad)) < NEWTON_TOL:
            return EvidenceFit(w=w, iterations=it - 1, converged=True, ridge=ridge)
        hess = (phi * (mu * (1 - mu))[:, None]).T @ phi + ridge * np.eye(p)
        step = np.linalg.solve(hess, grad)
        f0 = _nll(phi, y, w, ridge)
        t = 1.0
        # halve until the likelihood improves
        while t > 1e-10 and _nll(phi, y, w - t * step, ridge) > f0:
            t *= 0.5
        w = w - t * step
        if np.max(np.abs(w)) > SEPARATION_NORM and ridge == 0:
            return EvidenceFit(w=w, iterations=it, converged=False, ridge=ridge)
    mu = expit(phi @ w)
    grad = phi.T @ (mu - y) + ridge * w
    return EvidenceFit(w=w, iterations=NEWTON_MAX_ITER, converged=bool(np.max(np.abs(grad)) < NEWTON_TOL),
                       ridge=ridge)


def fit_evidence_model(phi: np.ndarray, y: np.ndarray, report: DiagnosticReport = None,
                       name: str = None) -> EvidenceFit:
    """
    Maximum-likelihood logistic fit of y on phi by damped Newton

    Falls back to an L2 penalty of 1e-4 when the classes are separable
    (weights diverge) or the Hessian is singular.
    """
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DataError(f"evidence model {name or ''} needs both classes")
    try:
        fit = _newton(phi, y, 0.0)
        if fit.converged:
            return fit
        reason = "separable classes"
    except np.linalg.LinAlgError:
        reason = "singular Hessian"
    msg = f'Evidence model {name or ""}: {reason}, refitting with ridge {RIDGE_FALLBACK}'
    if report is not None:
        report.add_message(msg, category=Category.RidgeFallback, field=name)
    else:
        logger.warning(msg)
    return _newton(phi, y, RIDGE_FALLBACK)


def calibrate_temperature(scores: np.ndarray, y: np.ndarray, report: DiagnosticReport = None,
                          name: str = None) -> TemperatureFit:
    """
    T = argmin NLL(sigmoid(s / T)) over log T in [-2.5, 2.5] (bounded Brent)
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def nll(log_t):
        z = s / np.exp(log_t)
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    res = minimize_scalar(nll, bounds=LOG_T_BOUNDS, method="bounded", options={"xatol": TEMPERATURE_TOL})
    log_t = float(res.x)
    at_boundary = min(abs(log_t - LOG_T_BOUNDS[0]), abs(log_t - LOG_T_BOUNDS[1])) < 1e-3
    if at_boundary:
        msg = f'Temperature {name or ""} pinned at the search boundary (log T = {log_t:.4f})'
        if report is not None:
            report.add_message(msg, category=Category.TemperatureBoundary, field=name)
        else:
            logger.warning(msg)
    return TemperatureFit(T=float(np.exp(log_t)), nll=float(res.fun), at_boundary=at_boundary)


def youden_threshold(vcdr: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """
    Cutoff among midpoints of the sorted unique vCDRs maximising Se + Sp - 1;
    a case is called positive when vCDR > tau. Returns (tau, J); ties go to
    the smallest tau.
    """
    v = np.asarray(vcdr, dtype=np.float64)
    y = np.asarray(y)
    pos, neg = y == 1, y == 0
    if not pos.any() or not neg.any():
        raise DataError("Youden threshold needs both classes")
    u = np.unique(v)
    if len(u) == 1:
        return float(u[0]), 0.0
    cand = 0.5 * (u[1:] + u[:-1])
    called = v[None, :] > cand[:, None]
    se = called[:, pos].mean(axis=1)
    sp = (~called[:, neg]).mean(axis=1)
    j = se + sp - 1.0
    best = int(np.argmax(j))
    return float(cand[best]), float(j[best])


def case_difficulty(vcdr_med, tau: float, kappa_diff: float) -> np.ndarray:
    """beta = exp(-kappa |vCDR_med - tau|)"""
    return np.exp(-kappa_diff * np.abs(np.asarray(vcdr_med, dtype=np.float64) - tau))


def operating_points(p_cal, beta, se: float, sp: float, alpha: float, gamma: float,
                     rho_ref: float, b: float, d: float):
    """
    logit Se_ij = logit Se_j + alpha (p_cal - rho) - b beta
    logit Sp_ij = logit Sp_j - gamma (p_cal - rho) - d beta
    """
    p_cal = np.asarray(p_cal, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    se_i = expit(logit(se) + alpha * (p_cal - rho_ref) - b * beta)
    sp_i = expit(logit(sp) - gamma * (p_cal - rho_ref) - d * beta)
    return se_i, sp_i


def success_probability(y, se_i, sp_i) -> np.ndarray:
    """Phi = y Se + (1 - y) Sp"""
    y = np.asarray(y, dtype=np.float64)
    return y * se_i + (1.0 - y) * sp_i
