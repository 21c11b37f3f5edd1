"""
One-sided augmented-Lagrangian controller for the soft deferral budget
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..config import CostConfig

logger = logging.getLogger(__name__)


@dataclass
class ALState:
    lambda_def: float = 0.0
    history: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        if self.lambda_def < 0:
            raise ValueError(f"lambda_def must be nonnegative, got {self.lambda_def}")

    def as_dict(self) -> Dict:
        return {"lambda_def": self.lambda_def, "history": list(self.history)}

    @staticmethod
    def from_dict(d: Dict) -> 'ALState':
        return ALState(lambda_def=float(d.get("lambda_def", 0.0)), history=list(d.get("history", [])))


def al_penalty(d_bar: float, lambda_def: float, rho_def: float, mu: float) -> Tuple[float, float]:
    """
    lambda (d_bar - rho) + mu/2 [d_bar - rho]_+^2 and its derivative in d_bar
    """
    gap = d_bar - rho_def
    excess = max(gap, 0.0)
    return lambda_def * gap + 0.5 * mu * excess * excess, lambda_def + mu * excess


def update_multiplier(al: ALState, d_bar: float, cfg: CostConfig, epoch: Optional[int] = None) -> ALState:
    """
    Projected ascent lambda <- [lambda + eta (d_bar - rho)]_+, run once per epoch
    """
    gap = d_bar - cfg.rho_def
    new_lambda = max(al.lambda_def + cfg.eta_lambda * gap, 0.0)
    record = {"epoch": epoch, "d_bar": float(d_bar), "violation": max(gap, 0.0), "lambda_def": new_lambda}
    return ALState(lambda_def=new_lambda, history=al.history + [record])


def augmented_lagrangian(d_bar: float, al: ALState, cfg: CostConfig,
                         epoch: Optional[int] = None) -> Tuple[float, ALState]:
    """
    Penalty at the current multiplier together with the state the epoch-end
    update would produce
    """
    if not 0.0 <= d_bar <= 1.0:
        raise ValueError(f"d_bar must lie in [0, 1], got {d_bar}")
    penalty, _ = al_penalty(d_bar, al.lambda_def, cfg.rho_def, cfg.mu)
    return penalty, update_multiplier(al, d_bar, cfg, epoch)
