"""AdamW with decoupled weight decay over named numpy parameter arrays."""
import logging
from collections import OrderedDict
from typing import Dict

import numpy as np

from ..config import OptimizerConfig
from ..errors import ConfigError
from .router_net import RouterParams

logger = logging.getLogger(__name__)


class AdamW:
    """
    m_t = b1 m + (1 - b1) g
    v_t = b2 v + (1 - b2) g^2
    theta <- theta (1 - lr wd) - lr mhat / (sqrt(vhat) + eps)
    """

    def __init__(self, params: RouterParams, lr: float = 3e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        if lr < 0:
            raise ConfigError(f"Invalid learning rate: {lr}")
        if not 0.0 <= beta1 < 1.0:
            raise ConfigError(f"Invalid beta1: {beta1}")
        if not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"Invalid beta2: {beta2}")
        if eps < 0 or weight_decay < 0:
            raise ConfigError(f"Invalid eps / weight decay: {eps} / {weight_decay}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.arrays.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.arrays.items())
        logger.debug(f"Initialized AdamW: lr={lr}, beta1={beta1}, beta2={beta2}, weight_decay={weight_decay}")

    @staticmethod
    def from_config(params: RouterParams, cfg: OptimizerConfig) -> 'AdamW':
        return AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                     weight_decay=cfg.weight_decay)

    def step(self, params: RouterParams, grads: Dict[str, np.ndarray]) -> RouterParams:
        """
        Returns the updated parameters; ``params`` is left untouched
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        out = OrderedDict()
        for name, p in params.arrays.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p = p * (1.0 - self.lr * self.weight_decay)
            out[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return RouterParams(out)

    def state_dict(self) -> Dict:
        return {"step": self.step_count,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    def load_state_dict(self, state: Dict) -> None:
        self.step_count = int(state["step"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)
