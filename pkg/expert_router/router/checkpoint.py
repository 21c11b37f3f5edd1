"""
Versioned JSON checkpoint of a trained router

Layout::

    {"format": "expert-router-checkpoint", "version": 1,
     "n_experts": M, "router": {...hidden sizes, temperatures...},
     "params": {name: {"shape": [...], "values": [...]}},
     "feature_stats": {"mean": {...}, "std": {...}},
     "optimizer": {"step": t, "m": {...}, "v": {...}},
     "lagrangian": {"lambda_def": ..., "history": [...]},
     "noise": {"seed": s, "epoch": e},
     "epoch": best epoch, "config_hash": sha256, "extra": {...}}

Floats are written with repr precision so a load reproduces the arrays
bit for bit.
"""
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union

import numpy as np

from ..errors import ConfigError
from .features import FeatureStats
from .router_net import RouterParams

logger = logging.getLogger(__name__)

FILE_PATH = Union[str, bytes, os.PathLike]
CHECKPOINT_FORMAT = "expert-router-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: RouterParams
    feature_stats: FeatureStats
    router: Dict[str, Any] = field(default_factory=dict)
    optimizer: Optional[Dict] = None
    lagrangian: Dict[str, Any] = field(default_factory=dict)
    noise: Dict[str, int] = field(default_factory=dict)
    epoch: int = 0
    config_hash: str = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_experts(self) -> int:
        return self.params.n_experts

    def as_dict(self) -> Dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "n_experts": self.n_experts,
            "router": self.router,
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                       for k, v in self.params.arrays.items()},
            "feature_stats": self.feature_stats.as_dict(),
            "optimizer": self.optimizer,
            "lagrangian": self.lagrangian,
            "noise": self.noise,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "extra": self.extra,
        }

    @staticmethod
    def from_dict(d: Dict) -> 'Checkpoint':
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a router checkpoint (format={d.get('format')})")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {d.get('version')}")
        arrays = OrderedDict((k, np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]))
                             for k, v in d["params"].items())
        return Checkpoint(params=RouterParams(arrays),
                          feature_stats=FeatureStats.from_dict(d["feature_stats"]),
                          router=d.get("router", {}),
                          optimizer=d.get("optimizer"),
                          lagrangian=d.get("lagrangian", {}),
                          noise=d.get("noise", {}),
                          epoch=int(d.get("epoch", 0)),
                          config_hash=d.get("config_hash"),
                          extra=d.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path: FILE_PATH) -> None:
    with open(path, "w") as stream:
        json.dump(ckpt.as_dict(), stream, sort_keys=True, indent=1)
        stream.write("\n")
    logger.info(f"Saved checkpoint (epoch {ckpt.epoch}) to {path}")


def load_checkpoint(path: FILE_PATH) -> Checkpoint:
    try:
        with open(path) as stream:
            d = json.load(stream)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    return Checkpoint.from_dict(d)
