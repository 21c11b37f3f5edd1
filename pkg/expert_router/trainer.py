"""
Training loop with the epoch-end deferral-budget controller, plus budget
sweeps and objective ablations built on it
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .cohort.cohort_table import CohortTable
from .config import RunConfig, config_hash
from .errors import DataError, NonFiniteLossError
from .evaluation.evaluator import evaluate_checkpoint
from .evaluation.outcomes import ROUTER
from .objective.groups import GroupAssignment, apply_groups, assign_groups, penalty_keys
from .objective.lagrangian import ALState, update_multiplier
from .objective.priors import PriorTree, build_prior_tree, prior_matrix
from .objective.total import ObjectiveContext, forward_objective, make_context, objective_gradients
from .report_model import DiagnosticReport, ensure_report
from .router.adamw import AdamW
from .router.checkpoint import Checkpoint
from .router.features import FeatureStats, StateBatch, batch_from_cohort, standardize_features
from .router.noise import NoiseStream
from .router.router_net import RouterParams, init_params

logger = logging.getLogger(__name__)

FILE_PATH = Union[str, bytes, os.PathLike]

SEED_INIT = 1
SEED_SHUFFLE = 2

LOSS_KEYS = ("routing", "gsdp", "rank", "al", "total")

FULL = "full"
NO_TIER = "no_tier"
CLINICAL_ONLY = "clinical_only"
NO_GSDP = "no_gsdp"
NO_RANK = "no_rank"
NO_REGULARIZERS = "no_regularizers"

ABLATIONS = {
    FULL: {},
    NO_TIER: {"gamma_tier": 0.0},
    CLINICAL_ONLY: {"gamma_tier": 0.0, "w_gsdp": 0.0, "w_rank": 0.0, "mu": 0.0, "eta_lambda": 0.0,
                    "lambda_init": 0.0},
    NO_GSDP: {"w_gsdp": 0.0},
    NO_RANK: {"w_rank": 0.0},
    NO_REGULARIZERS: {"w_gsdp": 0.0, "w_rank": 0.0},
}

ABLATION_COLUMNS = ["clinical_cost", "expert_cost", "total_cost", "defer_soft", "defer_hard", "top1_share",
                    "top2_share", "n_eff", "entropy_collapse", "gini_norm", "top1_share_soft", "n_eff_soft",
                    "load_cv_soft", "dead_frac_soft"]

COLLAPSE_KEYS = ("top1_share", "top2_share", "n_eff", "entropy_collapse", "gini_norm")
SOFT_LOAD_KEYS = ("top1_share", "n_eff", "load_cv", "dead_frac")


@dataclass
class PreparedData:
    """
    Train and validation batches with everything fitted on the train split
    """
    train: StateBatch
    val: StateBatch
    stats: FeatureStats
    groups: GroupAssignment
    val_groups: GroupAssignment
    tree: PriorTree
    train_priors: np.ndarray
    val_priors: np.ndarray
    kappa: List[float]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("inf")
    stopped_early: bool = False
    tree: Optional[PriorTree] = None


def prepare_data(cohort: CohortTable, cfg: RunConfig, report: DiagnosticReport = None) -> PreparedData:
    """
    Standardise, group and build priors on train; apply the fitted pieces to val
    """
    train_c, val_c = cohort.split("train"), cohort.split("val")
    if len(train_c) == 0 or len(val_c) == 0:
        raise DataError(f"training needs train and val rows (got {len(train_c)} and {len(val_c)})")
    std_train, stats = standardize_features(train_c, report=report)
    std_val, _ = standardize_features(val_c, stats)
    groups = assign_groups(train_c.masks(), train_c.column("prob_1"), cfg.prior.n_clusters)
    val_groups = apply_groups(groups, val_c.masks(), val_c.column("prob_1"), report)
    train = batch_from_cohort(std_train, penalty_keys(groups))
    val = batch_from_cohort(std_val, penalty_keys(val_groups))
    kappa = cfg.costs.tier_costs(cohort.n_experts)
    tree = build_prior_tree(train, groups, cfg.costs, cfg.prior, kappa, report)
    return PreparedData(train=train, val=val, stats=stats, groups=groups, val_groups=val_groups, tree=tree,
                        train_priors=prior_matrix(tree, groups), val_priors=prior_matrix(tree, val_groups),
                        kappa=kappa)


def validation_score(params: RouterParams, data: PreparedData, ctx: ObjectiveContext,
                     cfg: RunConfig) -> Dict[str, float]:
    """
    Mode-gate validation objective without the AL term, plus the weighted
    budget violation
    """
    value, _ = forward_objective(params, data.val, ctx, cfg.router, priors=data.val_priors, noise=None,
                                 with_al=False)
    violation = max(value.breakdown["d_bar"] - cfg.costs.rho_def, 0.0)
    score = value.total + cfg.training.violation_weight * violation
    return {"val_objective": value.total, "val_routing": value.breakdown["routing"],
            "val_d_bar": value.breakdown["d_bar"], "val_violation": violation, "val_score": score}


def _dump_nonfinite(path: FILE_PATH, err: NonFiniteLossError, epoch: int, rows: np.ndarray,
                    params: RouterParams, al: ALState) -> None:
    doc = {"error": str(err), "epoch": epoch, "sample_ids": err.sample_ids, "batch_rows": [int(r) for r in rows],
           "params_finite": params.is_finite(), "lambda_def": al.lambda_def,
           "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.arrays.items()}}
    with open(path, "w") as stream:
        json.dump(doc, stream, indent=1, sort_keys=True, default=str)
    logger.error(f"Non-finite loss at epoch {epoch}; diagnostics written to {path}")


def train_step(params: RouterParams, opt: AdamW, batch: StateBatch, ctx: ObjectiveContext, cfg: RunConfig,
               priors: np.ndarray, noise: Optional[np.ndarray]):
    """
    Objective, analytic gradients and one AdamW update on a batch

    Returns (params, objective value, forward trace).
    """
    value, trace, grads = objective_gradients(params, batch, ctx, cfg.router, priors=priors, noise=noise)
    params = opt.step(params, grads)
    if not params.is_finite():
        raise NonFiniteLossError("parameters became non-finite", list(batch.ids))
    return params, value, trace


def run_epoch(params: RouterParams, opt: AdamW, data: PreparedData, ctx: ObjectiveContext, cfg: RunConfig,
              noise: NoiseStream, order: np.ndarray, epoch: int, dump_path: Optional[FILE_PATH] = None):
    """
    One pass over the shuffled train split; returns (params, mean losses, epoch d_bar)
    """
    n = len(data.train)
    bs = cfg.training.batch_size
    sums = dict.fromkeys(LOSS_KEYS, 0.0)
    d_sum = 0.0
    for start in range(0, n, bs):
        rows = order[start:start + bs]
        batch = data.train.take(rows)
        eta = noise.logistic(epoch, batch.index)
        try:
            params, value, trace = train_step(params, opt, batch, ctx, cfg, data.train_priors[rows], eta)
        except NonFiniteLossError as e:
            if dump_path is not None:
                _dump_nonfinite(dump_path, e, epoch, rows, params, ctx.al)
            raise
        for k in LOSS_KEYS:
            sums[k] += value.breakdown[k] * len(rows)
        d_sum += float(trace.defer_mass.sum())
    return params, {k: v / n for k, v in sums.items()}, d_sum / n


def train_router(cohort: CohortTable, cfg: RunConfig, report: DiagnosticReport = None,
                 log_path: Optional[FILE_PATH] = None, dump_path: Optional[FILE_PATH] = None) -> TrainResult:
    """
    Fit the router on the train split, early-stopping on the validation score

    The multiplier is updated once per epoch from the epoch-mean soft defer
    mass. The best checkpoint after warmup is returned.
    """
    report = ensure_report(report)
    data = prepare_data(cohort, cfg, report)
    m = cohort.n_experts
    params = init_params(m, cfg.router, np.random.default_rng([cfg.seed, SEED_INIT]))
    opt = AdamW.from_config(params, cfg.optimizer)
    noise = NoiseStream(cfg.seed, len(data.train), m)
    shuffle_rng = np.random.default_rng([cfg.seed, SEED_SHUFFLE])
    ctx = make_context(cfg.costs, m, kappa=data.kappa)
    # file locations do not change the trained router
    chash = config_hash(cfg, exclude=["paths"])

    best = None
    best_score = float("inf")
    best_epoch = 0
    stale = 0
    history = []
    stopped_early = False
    log = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.training.max_epochs):
            order = shuffle_rng.permutation(len(data.train))
            params, losses, d_bar = run_epoch(params, opt, data, ctx, cfg, noise, order, epoch, dump_path)
            lambda_used = ctx.al.lambda_def
            ctx.al = update_multiplier(ctx.al, d_bar, cfg.costs, epoch)
            val = validation_score(params, data, ctx, cfg)
            improved = False
            if epoch >= cfg.training.warmup_epochs:
                if val["val_score"] < best_score:
                    best_score, best_epoch, stale, improved = val["val_score"], epoch, 0, True
                    best = (params.copy(), opt.state_dict(), ALState.from_dict(ctx.al.as_dict()))
                else:
                    stale += 1
            record = {"epoch": epoch, **losses, "d_bar": d_bar, "lambda_used": lambda_used,
                      "lambda_def": ctx.al.lambda_def, **val, "best": improved}
            history.append(record)
            if log is not None:
                log.write(json.dumps(record, sort_keys=True) + "\n")
            logger.debug(f"epoch {epoch}: total={losses['total']:.5f} d_bar={d_bar:.4f} "
                         f"lambda={ctx.al.lambda_def:.4f} val={val['val_score']:.5f}")
            if stale >= cfg.training.patience:
                stopped_early = True
                logger.info(f"Early stop at epoch {epoch}; best epoch {best_epoch}")
                break
    finally:
        if log is not None:
            log.close()

    if best is None:
        best_epoch = len(history) - 1
        best_score = history[-1]["val_score"]
        best = (params.copy(), opt.state_dict(), ctx.al)
    best_params, opt_state, al = best
    ckpt = Checkpoint(params=best_params, feature_stats=data.stats, router=cfg.router.model_dump(mode="json"),
                      optimizer=opt_state, lagrangian=al.as_dict(), noise={"seed": cfg.seed, "epoch": best_epoch},
                      epoch=best_epoch, config_hash=chash,
                      extra={"groups": data.groups.as_dict(), "kappa": list(data.kappa),
                             "n_train": len(data.train), "n_val": len(data.val), "val_score": best_score,
                             "rho_def": cfg.costs.rho_def})
    logger.info(f"Trained {len(history)} epochs; best epoch {best_epoch} with validation score {best_score:.5f}")
    return TrainResult(checkpoint=ckpt, history=history, best_epoch=best_epoch, best_score=best_score,
                       stopped_early=stopped_early, tree=data.tree)


def with_costs(cfg: RunConfig, seed: Optional[int] = None, **costs) -> RunConfig:
    """Copy of ``cfg`` with cost fields (and optionally the seed) replaced"""
    doc = cfg.model_dump()
    doc["costs"].update(costs)
    if seed is not None:
        doc["seed"] = seed
    return RunConfig.model_validate(doc)


def _run_summary(cohort: CohortTable, cfg: RunConfig, split: str) -> Dict[str, Any]:
    result = train_router(cohort, cfg)
    metrics = evaluate_checkpoint(result.checkpoint, cohort, cfg, split)
    block = metrics.methods[ROUTER]
    hard = block["collapse"]["hard"] or {}
    soft = block["collapse"]["soft"] or {}
    row = {"seed": cfg.seed, "rho_def": cfg.costs.rho_def, "best_epoch": result.best_epoch,
           "lambda_def": result.checkpoint.lagrangian.get("lambda_def", 0.0),
           **block["costs"], "defer_soft": block["deferral"]["defer_soft"],
           "defer_hard": block["deferral"]["defer_hard"], **block["budget"],
           "accuracy": block["classification"]["accuracy"], "mcc": block["classification"]["mcc"]}
    for k in COLLAPSE_KEYS:
        row[k] = hard.get(k, np.nan)
    for k in SOFT_LOAD_KEYS:
        row[f"{k}_soft"] = soft.get(k, np.nan)
    return row


def _run_all(cohort: CohortTable, cfgs: Sequence[RunConfig], split: str, parallel: bool) -> List[Dict[str, Any]]:
    if parallel and len(cfgs) > 1:
        with ProcessPoolExecutor() as pool:
            return list(pool.map(_run_summary, [cohort] * len(cfgs), cfgs, [split] * len(cfgs)))
    return [_run_summary(cohort, c, split) for c in cfgs]


def sweep_targets(cohort: CohortTable, cfg: RunConfig, targets: Optional[Sequence[float]] = None,
                  split: Optional[str] = None) -> pd.DataFrame:
    """
    Train one router per deferral target; gap = realised deferral - target
    """
    targets = list(targets if targets is not None else cfg.sweep.targets)
    split = split or cfg.evaluation.split
    cfgs = [with_costs(cfg, seed=cfg.seed + k if cfg.sweep.reseed else None, rho_def=t)
            for k, t in enumerate(targets)]
    rows = _run_all(cohort, cfgs, split, cfg.sweep.parallel)
    for t, row in zip(targets, rows):
        row["target"] = t
    df = pd.DataFrame(rows)
    front = ["target", "defer_soft", "defer_hard", "gap_soft", "gap_hard", "violation"]
    return df[front + [c for c in df.columns if c not in front]]


def ablate(cohort: CohortTable, cfg: RunConfig, seeds: Optional[Sequence[int]] = None,
           conditions: Optional[Sequence[str]] = None, split: Optional[str] = None):
    """
    Train every objective ablation over several seeds

    Returns (per-run table, per-condition mean and std table).
    """
    seeds = list(seeds if seeds is not None else cfg.sweep.ablation_seeds)
    conditions = list(conditions or ABLATIONS)
    unknown = [c for c in conditions if c not in ABLATIONS]
    if unknown:
        raise KeyError(f"unknown ablation conditions {unknown}")
    split = split or cfg.evaluation.split
    cfgs, labels = [], []
    for cond in conditions:
        for s in seeds:
            cfgs.append(with_costs(cfg, seed=s, **ABLATIONS[cond]))
            labels.append(cond)
    rows = _run_all(cohort, cfgs, split, cfg.sweep.parallel)
    for cond, row in zip(labels, rows):
        row["condition"] = cond
    runs = pd.DataFrame(rows)
    summary = runs.groupby("condition", sort=False)[ABLATION_COLUMNS].agg(["mean", "std"])
    summary.columns = [f"{c}_{stat}" for c, stat in summary.columns]
    return runs, summary.reset_index()
