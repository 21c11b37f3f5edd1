"""
Configuration models

Run and generation configs are YAML documents validated by pydantic; every
field has a default and unknown keys are rejected.
"""
import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

FILE_PATH = Union[str, bytes, os.PathLike]

DEFAULT_TIERS = (0.1, 0.2, 0.3)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PathsConfig(_Section):
    cohort: str = "cohort.csv"
    checkpoint: str = "router.ckpt.json"
    report_dir: str = "reports"
    train_log: Optional[str] = None

    def resolved_train_log(self) -> str:
        if self.train_log:
            return self.train_log
        stem = self.checkpoint[:-5] if self.checkpoint.endswith(".json") else self.checkpoint
        return stem + ".train.jsonl"


class CostConfig(_Section):
    """
    Clinical, operational and regulariser weights of the routing objective
    """
    c_fn: float = 2.0
    c_fp: float = 1.5
    c_fn_prior: float = 1.8
    c_fp_prior: float = 1.2
    kappa: Optional[List[float]] = None
    gamma_tier: float = Field(0.5, ge=0)
    w_gsdp: float = Field(0.2, ge=0)
    w_rank: float = Field(0.2, ge=0)
    rank_varrho: float = Field(0.5, gt=0, lt=1)
    rank_margin: float = Field(0.05, ge=0)
    rho_def: float = Field(0.5, ge=0, le=1)
    mu: float = Field(10.0, ge=0)
    eta_lambda: float = Field(0.1, ge=0)
    lambda_init: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _check_costs(self):
        if not (self.c_fn > self.c_fp > 0):
            raise ValueError(f"need c_fn > c_fp > 0, got c_fn={self.c_fn} c_fp={self.c_fp}")
        if self.c_fn_prior < 0 or self.c_fp_prior < 0:
            raise ValueError("prior badness costs must be nonnegative")
        if self.kappa is not None and any(k < 0 for k in self.kappa):
            raise ValueError("tier costs must be nonnegative")
        return self

    def tier_costs(self, n_experts: int) -> List[float]:
        """
        Tier cost per expert; three tiers assigned round-robin when not given
        """
        if self.kappa is None:
            return [DEFAULT_TIERS[j % len(DEFAULT_TIERS)] for j in range(n_experts)]
        if len(self.kappa) != n_experts:
            raise ConfigError(f"kappa has {len(self.kappa)} entries for {n_experts} experts")
        return list(self.kappa)


class PriorConfig(_Section):
    n_fam0: float = Field(20.0, ge=0)
    n_grp0: float = Field(10.0, ge=0)
    rho_glob: float = Field(0.1, ge=0, le=1)
    u_glob: float = Field(0.05, ge=0, le=1)
    u_fam: float = Field(0.05, ge=0, le=1)
    u_grp: float = Field(0.05, ge=0, le=1)
    tau_bad: float = Field(1.0, ge=0)
    capacity: Optional[List[float]] = None
    n_min_global: int = Field(1, ge=1)
    n_min_family: int = Field(1, ge=1)
    n_min_group: int = Field(5, ge=1)
    n_clusters: int = Field(2, ge=1)


class RouterConfig(_Section):
    hidden_branch: int = Field(16, ge=1)
    hidden_fuse: int = Field(32, ge=1)
    hidden_trunk: int = Field(32, ge=1)
    tau_g: float = Field(1.0, gt=0)
    tau_a: float = Field(1.0, gt=0)
    logit_clamp: float = Field(30.0, gt=0)


class OptimizerConfig(_Section):
    lr: float = Field(3e-3, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, ge=0)


class TrainingConfig(_Section):
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(150, ge=1)
    warmup_epochs: int = Field(10, ge=0)
    patience: int = Field(18, ge=1)
    violation_weight: float = Field(10.0, ge=0)


class EvaluationConfig(_Section):
    split: str = "test"
    risk_bins: int = Field(5, ge=1)
    ai_threshold: float = Field(0.5, ge=0, le=1)


class SweepConfig(_Section):
    targets: List[float] = Field(default_factory=lambda: [0.25, 0.40, 0.60])
    reseed: bool = False
    parallel: bool = False
    ablation_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])

    @model_validator(mode="after")
    def _check_targets(self):
        if any(t < 0 or t > 1 for t in self.targets):
            raise ValueError("sweep targets must lie in [0, 1]")
        return self


class RunConfig(_Section):
    """
    Everything a training / evaluation run needs
    """
    seed: int = 42
    paths: PathsConfig = Field(default_factory=PathsConfig)
    costs: CostConfig = Field(default_factory=CostConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    router: RouterConfig = Field(default_factory=RouterConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)


class ExpertProfileSpec(_Section):
    name: str
    block: str
    se: float = Field(0.8, gt=0, lt=1)
    sp: float = Field(0.9, gt=0, lt=1)
    alpha: float = Field(1.0, ge=0)
    gamma: float = Field(1.0, ge=0)
    fixed_accuracy: Optional[float] = Field(None, gt=0, lt=1)


class SubCohortSpec(_Section):
    name: str
    n: int = Field(0, ge=0)
    split_counts: Optional[Dict[str, int]] = None
    prevalence: float = Field(0.2, ge=0, le=1)
    ai_scale: float = 10.0
    ai_shift: float = 0.0
    ai_noise: float = Field(0.6, ge=0)
    ood_shift: float = 0.0
    quality_contamination: float = Field(0.05, ge=0, le=1)
    label_source: str = "simulated"
    expert_block: Optional[str] = None
    availability: float = Field(0.5, ge=0, le=1)

    @model_validator(mode="after")
    def _check(self):
        if self.label_source not in ("simulated", "retrieval"):
            raise ValueError(f"unknown label_source {self.label_source}")
        if self.split_counts is not None:
            unknown = set(self.split_counts) - {"train", "val", "test"}
            if unknown:
                raise ValueError(f"unknown splits {sorted(unknown)}")
        return self

    def total(self) -> int:
        if self.split_counts is not None:
            return sum(self.split_counts.values())
        return self.n


class DifficultySpec(_Section):
    kappa_diff: float = Field(5.0, gt=0)
    rho_ref: float = 0.5
    b: float = Field(0.5, ge=0)
    d: float = Field(0.5, ge=0)
    k_min: Optional[int] = Field(None, ge=0)


class AnatomySpec(_Section):
    disc_height_log_mean: float = 5.3
    disc_height_log_sd: float = Field(0.1, ge=0)
    disc_aspect_low: float = Field(0.9, gt=0)
    disc_aspect_high: float = Field(1.1, gt=0)
    cup_aspect_low: float = Field(0.85, gt=0)
    cup_aspect_high: float = Field(1.15, gt=0)
    max_rotation: float = Field(0.35, ge=0)
    center_offset_sd: float = Field(0.03, ge=0)
    # mixture components as [weight, a, b]
    vcdr_negative: List[List[float]] = Field(default_factory=lambda: [[0.85, 9.0, 11.0], [0.15, 12.0, 8.0]])
    vcdr_positive: List[List[float]] = Field(default_factory=lambda: [[0.85, 14.0, 6.0], [0.15, 10.0, 10.0]])
    annotator_noise: float = Field(0.03, ge=0)


def _default_experts() -> List[ExpertProfileSpec]:
    chaksu = [(0.92, 0.95), (0.89, 0.83), (0.86, 0.93), (0.81, 0.89), (0.46, 0.99)]
    refuge = [(0.79, 0.96), (0.79, 0.94), (0.75, 0.75), (0.80, 0.83), (0.87, 0.83), (0.88, 0.80), (0.58, 0.93)]
    experts = [ExpertProfileSpec(name=f"chaksu_expert_{j + 1}", block="chaksu", se=se, sp=sp)
               for j, (se, sp) in enumerate(chaksu)]
    experts += [ExpertProfileSpec(name=f"refuge_expert_{j + 1}", block="refuge", se=se, sp=sp)
                for j, (se, sp) in enumerate(refuge)]
    return experts


def _default_cohorts() -> List[SubCohortSpec]:
    return [
        SubCohortSpec(name="refuge", n=750, prevalence=0.12, ai_scale=12.0, ai_shift=0.0, ai_noise=0.5,
                      ood_shift=0.0, expert_block="refuge", availability=0.55),
        SubCohortSpec(name="chaksu", n=840, prevalence=0.18, ai_scale=6.0, ai_shift=-0.8, ai_noise=1.4,
                      ood_shift=1.5, expert_block="chaksu", availability=0.85),
        SubCohortSpec(name="origa", n=410, prevalence=0.25, ai_scale=3.0, ai_shift=-1.5, ai_noise=2.0,
                      ood_shift=3.0, label_source="retrieval"),
    ]


class GenerationSpec(_Section):
    """
    Synthetic multi-expert cohort recipe
    """
    seed: int = 42
    experts: List[ExpertProfileSpec] = Field(default_factory=_default_experts)
    cohorts: List[SubCohortSpec] = Field(default_factory=_default_cohorts)
    split_fractions: Dict[str, float] = Field(default_factory=lambda: {"train": 0.44, "val": 0.28, "test": 0.28})
    difficulty: DifficultySpec = Field(default_factory=DifficultySpec)
    anatomy: AnatomySpec = Field(default_factory=AnatomySpec)
    mask_regime: str = "dataset"
    uniform_availability: float = Field(0.5, ge=0, le=1)
    embedding_dim: int = Field(8, ge=2)
    embedding_noise: float = Field(0.3, ge=0)
    retrieval_k: int = Field(7, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.mask_regime not in ("dataset", "uniform"):
            raise ValueError(f"unknown mask_regime {self.mask_regime}")
        if set(self.split_fractions) != {"train", "val", "test"}:
            raise ValueError("split_fractions needs exactly train, val and test")
        if abs(sum(self.split_fractions.values()) - 1.0) > 1e-9:
            raise ValueError("split_fractions must sum to 1")
        if not self.experts:
            raise ValueError("at least one expert is required")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ValueError("expert names must be unique")
        for c in self.cohorts:
            if c.total() <= 0:
                raise ValueError(f"cohort {c.name} has no rows")
            if c.prevalence <= 0 or c.prevalence >= 1:
                raise ValueError(f"cohort {c.name} needs a prevalence strictly inside (0, 1)")
            if self.mask_regime == "dataset" and c.label_source == "simulated":
                if not any(e.block == c.expert_block for e in self.experts):
                    raise ValueError(f"cohort {c.name} references unknown expert block {c.expert_block}")
        if any(c.label_source == "retrieval" for c in self.cohorts) and \
                not any(c.label_source == "simulated" for c in self.cohorts):
            raise ValueError("retrieval cohorts need at least one simulated cohort as pool")
        return self

    @property
    def n_experts(self) -> int:
        return len(self.experts)


MODELS = {"run": RunConfig, "generation": GenerationSpec}


def _parse_model(kind: str, obj: Dict[str, Any]):
    try:
        return MODELS[kind].model_validate(obj or {})
    except ValidationError as e:
        raise ConfigError(f"invalid {kind} config: {e}") from e


def apply_overrides(obj: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply ``section.key=value`` overrides; values are parsed as YAML scalars
    """
    obj = json.loads(json.dumps(obj or {}))
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must look like key=value: {ov}")
        key, raw = ov.split("=", 1)
        parts = key.strip().split(".")
        node = obj
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-section {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return obj


def load_config(path: Optional[FILE_PATH], kind: str = "run", overrides: Sequence[str] = ()):
    obj = {}
    if path is not None:
        try:
            with open(path) as stream:
                obj = yaml.safe_load(stream) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed YAML in {path}: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a mapping")
    obj = apply_overrides(obj, overrides)
    return _parse_model(kind, obj)


def load_run_config(path: Optional[FILE_PATH] = None, overrides: Sequence[str] = ()) -> RunConfig:
    return load_config(path, "run", overrides)


def load_generation_spec(path: Optional[FILE_PATH] = None, overrides: Sequence[str] = ()) -> GenerationSpec:
    return load_config(path, "generation", overrides)


def config_hash(model: BaseModel, exclude: Optional[Sequence[str]] = None) -> str:
    doc = model.model_dump(mode="json", exclude=set(exclude) if exclude else None)
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def default_yaml(kind: str = "run") -> str:
    if kind not in MODELS:
        raise ConfigError(f"unknown config kind {kind}")
    return yaml.safe_dump(MODELS[kind]().model_dump(mode="json"), sort_keys=False)
