"""
Hierarchical reliability prior over experts: global -> family -> group

Each level estimates Laplace-smoothed FNR / FPR per expert from the
training rows it covers, turns them into a badness score and a
Boltzmann-style reliability distribution, then shrinks toward the level
above with count-based weights.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from ..config import CostConfig, PriorConfig
from ..report_model import Category, DiagnosticReport
from ..router.features import StateBatch
from .groups import UNSEEN, GroupAssignment

logger = logging.getLogger(__name__)


@dataclass
class LevelEstimate:
    """
    Statistics of one subset S (the whole train split, a family or a group)
    """
    level: str
    key: str
    n: int
    support: np.ndarray
    eligible: np.ndarray
    n_obs: np.ndarray
    fnr: np.ndarray
    fpr: np.ndarray
    badness: np.ndarray
    nu_hat: Optional[np.ndarray]
    prior: Optional[np.ndarray] = None
    weights: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict:
        def opt(a):
            return None if a is None else [float(x) for x in a]
        return {"level": self.level, "key": self.key, "n": int(self.n),
                "support": [int(j) for j in np.flatnonzero(self.support)],
                "eligible": [int(j) for j in np.flatnonzero(self.eligible)],
                "n_obs": [int(x) for x in self.n_obs],
                "fnr": opt(self.fnr), "fpr": opt(self.fpr), "badness": opt(self.badness),
                "nu_hat": opt(self.nu_hat), "prior": opt(self.prior),
                "weights": {k: float(v) for k, v in self.weights.items()}}


@dataclass
class PriorTree:
    glob: LevelEstimate
    families: List[LevelEstimate]
    groups: List[LevelEstimate]
    group_family: List[int]
    hyper: Dict[str, float] = field(default_factory=dict)

    @property
    def p_glob(self) -> np.ndarray:
        return self.glob.prior

    def group_prior(self, g: int) -> Optional[np.ndarray]:
        return self.groups[g].prior

    def family_prior(self, f: int) -> Optional[np.ndarray]:
        return self.families[f].prior

    def prior_for(self, group: int, family: int = UNSEEN) -> Optional[np.ndarray]:
        """
        Group prior; unseen groups fall back to the family prior and then the
        global prior. None for a known group with an empty support.
        """
        if group != UNSEEN and 0 <= group < len(self.groups):
            return self.groups[group].prior
        if family != UNSEEN and 0 <= family < len(self.families) and self.families[family].prior is not None:
            return self.families[family].prior
        return self.glob.prior

    def as_dict(self) -> Dict:
        return {"hyper": dict(self.hyper),
                "global": self.glob.as_dict(),
                "families": [f.as_dict() for f in self.families],
                "groups": [dict(g.as_dict(), family=int(f)) for g, f in zip(self.groups, self.group_family)]}


def laplace_error_rates(y: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """
    Per-expert (FNR, FPR, n_obs) with add-one / add-two smoothing
    """
    obs = mask > 0
    pos = obs & (y[:, None] == 1)
    neg = obs & (y[:, None] == 0)
    with np.errstate(invalid="ignore"):
        fn = (pos & (labels == 0)).sum(axis=0)
        fp = (neg & (labels == 1)).sum(axis=0)
    fnr = (fn + 1.0) / (pos.sum(axis=0) + 2.0)
    fpr = (fp + 1.0) / (neg.sum(axis=0) + 2.0)
    return fnr, fpr, obs.sum(axis=0)


def reliability_distribution(badness: np.ndarray, eligible: np.ndarray, tau_bad: float,
                             capacity: np.ndarray, u: float) -> Optional[np.ndarray]:
    """
    nu_j ∝ v_j exp(-tau_bad b_j) on the eligible support, mixed with a
    uniform on that support at weight u; None when nothing is eligible
    """
    if not np.any(eligible):
        return None
    logits = np.where(eligible, -tau_bad * badness, -np.inf)
    w = np.where(eligible, capacity * np.exp(logits - logits[eligible].max()), 0.0)
    nu = w / w.sum()
    uniform = eligible / eligible.sum()
    return (1.0 - u) * nu + u * uniform


def _renormalise_on(v: np.ndarray, support: np.ndarray) -> Optional[np.ndarray]:
    w = np.where(support, v, 0.0)
    total = w.sum()
    if total <= 0:
        return None
    return w / total


def _estimate(level: str, key: str, rows: np.ndarray, batch: StateBatch, kappa: np.ndarray,
              costs: CostConfig, prior_cfg: PriorConfig, capacity: np.ndarray, n_min: int,
              u: float) -> LevelEstimate:
    y, labels, mask = batch.y[rows], batch.expert_labels[rows], batch.mask[rows]
    fnr, fpr, n_obs = laplace_error_rates(y, labels, mask)
    badness = costs.c_fn_prior * fnr + costs.c_fp_prior * fpr + kappa
    support = mask.max(axis=0) > 0 if len(rows) else np.zeros(mask.shape[1], dtype=bool)
    eligible = n_obs >= n_min
    nu_hat = reliability_distribution(badness, eligible, prior_cfg.tau_bad, capacity, u)
    return LevelEstimate(level=level, key=key, n=len(rows), support=support, eligible=eligible,
                         n_obs=n_obs, fnr=fnr, fpr=fpr, badness=badness, nu_hat=nu_hat)


def build_prior_tree(batch: StateBatch, groups: GroupAssignment, costs: CostConfig,
                     prior_cfg: PriorConfig, kappa: Sequence[float] = None,
                     report: DiagnosticReport = None) -> PriorTree:
    """
    Build the prior tree from the training split

    p_glob = nu_hat_glob
    p_f    ∝ a_f nu_hat_f + (1 - a_f) p_glob                   on the family support
    p_g    ∝ a_g nu_hat_g + a_g_fam p_f + rho_glob p_glob      on the group support
    with a_f = n_f / (n_f + n_fam0), a_g = n_g / (n_g + n_grp0) and
    a_g_fam = max(1 - a_g - rho_glob, 0). An undefined nu_hat (empty eligible
    support) contributes nothing.
    """
    m = batch.mask.shape[1]
    kappa = np.asarray(kappa if kappa is not None else costs.tier_costs(m), dtype=np.float64)
    capacity = np.asarray(prior_cfg.capacity if prior_cfg.capacity is not None else np.ones(m), dtype=np.float64)
    zeros = np.zeros(m)

    glob = _estimate("global", "*", np.arange(len(batch)), batch, kappa, costs, prior_cfg, capacity,
                     prior_cfg.n_min_global, prior_cfg.u_glob)
    glob.prior = glob.nu_hat
    p_glob = glob.prior if glob.prior is not None else zeros

    families = []
    for f, key in enumerate(groups.family_keys):
        rows = np.flatnonzero(groups.family == f)
        est = _estimate("family", key, rows, batch, kappa, costs, prior_cfg, capacity,
                        prior_cfg.n_min_family, prior_cfg.u_fam)
        a_f = est.n / (est.n + prior_cfg.n_fam0) if est.n + prior_cfg.n_fam0 > 0 else 0.0
        nu = est.nu_hat if est.nu_hat is not None else zeros
        est.prior = _renormalise_on(a_f * nu + (1.0 - a_f) * p_glob, est.support)
        est.weights = {"a_f": a_f}
        families.append(est)

    group_levels, group_family = [], []
    for g, (f, c) in enumerate(groups.group_keys):
        rows = np.flatnonzero(groups.group == g)
        key = f"{groups.family_keys[f]}/{c}"
        est = _estimate("group", key, rows, batch, kappa, costs, prior_cfg, capacity,
                        prior_cfg.n_min_group, prior_cfg.u_grp)
        a_g = est.n / (est.n + prior_cfg.n_grp0) if est.n + prior_cfg.n_grp0 > 0 else 0.0
        a_fam = max(1.0 - a_g - prior_cfg.rho_glob, 0.0)
        nu = est.nu_hat if est.nu_hat is not None else zeros
        p_f = families[f].prior if families[f].prior is not None else zeros
        est.prior = _renormalise_on(a_g * nu + a_fam * p_f + prior_cfg.rho_glob * p_glob, est.support)
        est.weights = {"a_g": a_g, "a_g_fam": a_fam, "rho_glob": prior_cfg.rho_glob}
        if est.prior is None and report is not None:
            report.add_message(f'Group {key} has an empty expert support; its GSDP term is zero',
                               category=Category.EmptyGroupSupport, field=key)
        group_levels.append(est)
        group_family.append(f)

    hyper = {"n_fam0": prior_cfg.n_fam0, "n_grp0": prior_cfg.n_grp0, "rho_glob": prior_cfg.rho_glob,
             "u_glob": prior_cfg.u_glob, "u_fam": prior_cfg.u_fam, "u_grp": prior_cfg.u_grp,
             "tau_bad": prior_cfg.tau_bad, "c_fn_prior": costs.c_fn_prior, "c_fp_prior": costs.c_fp_prior}
    logger.info(f"Prior tree: {len(families)} families, {len(group_levels)} groups")
    return PriorTree(glob=glob, families=families, groups=group_levels, group_family=group_family, hyper=hyper)


def prior_matrix(tree: PriorTree, groups: GroupAssignment) -> np.ndarray:
    """Per-sample prior rows with the group -> family -> global fallback; NaN rows where undefined"""
    m = len(tree.glob.support)
    rows = []
    for g, f in zip(groups.group, groups.family):
        p = tree.prior_for(int(g), int(f))
        rows.append(np.full(m, np.nan) if p is None else p)
    return np.stack(rows) if rows else np.zeros((0, m))


def prior_tree_report(tree: PriorTree) -> str:
    """
    Human-readable YAML audit of supports, badness, priors and shrinkage weights
    """
    return yaml.safe_dump(tree.as_dict(), sort_keys=False)
