"""
Counter-based logistic noise for the gating head
"""
import logging
from typing import Optional

import numpy as np

from ..policy.policy_core import logistic_from_uniform

logger = logging.getLogger(__name__)


class NoiseStream:
    """
    Per-epoch Philox tables indexed by global sample index

    The noise a sample sees at a given epoch depends only on (seed, epoch,
    sample index), not on how the epoch was batched or shuffled.
    """

    def __init__(self, seed: int, n_samples: int, n_experts: int):
        if seed < 0:
            raise ValueError(f"noise seed must be nonnegative, got {seed}")
        self.seed = int(seed)
        self.n_samples = int(n_samples)
        self.n_experts = int(n_experts)
        self._epoch: Optional[int] = None
        self._table: Optional[np.ndarray] = None

    def _generator(self, epoch: int) -> np.random.Generator:
        key = np.array([self.seed, epoch], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def table(self, epoch: int) -> np.ndarray:
        if self._epoch != epoch:
            self._table = self._generator(epoch).random((self.n_samples, self.n_experts))
            self._epoch = epoch
        return self._table

    def uniforms(self, epoch: int, index) -> np.ndarray:
        return self.table(epoch)[np.asarray(index)]

    def logistic(self, epoch: int, index) -> np.ndarray:
        return logistic_from_uniform(self.uniforms(epoch, index))
