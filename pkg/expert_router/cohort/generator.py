"""
Synthetic multi-expert cohort generator

Pipeline per case: label -> disc / cup ellipses -> per-annotator
perturbations -> availability mask -> Youden threshold (train) -> per-expert
evidence models (fit on train, temperature on val) -> case-specific
operating points -> constrained correctness sampling -> expert labels.
Cohorts configured with ``label_source: retrieval`` take their expert
labels from label-matched neighbours among the simulated training rows.

Every per-row draw comes from ``default_rng([seed, stage, row])`` so the
output is byte-identical for a given spec.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from ..config import GenerationSpec, config_hash
from ..errors import ConfigError, DataError
from ..report_model import DiagnosticReport, ensure_report
from .biomarkers import biomarker_arrays, geometry_features, vertical_diameter
from .cohort_table import CohortTable, expert_column, write_cohort_csv
from .expert_models import (ExpertProfile, calibrate_temperature, case_difficulty, fit_evidence_model,
                            operating_points, success_probability, youden_threshold)
from .retrieval import l2_normalize, retrieve_pseudo_labels
from .sampler import conditional_correctness_sampler, instantiate_expert_labels

logger = logging.getLogger(__name__)

FILE_PATH = Union[str, bytes, os.PathLike]

STAGE_SPLIT = 1
STAGE_LABEL = 2
STAGE_ANATOMY = 3
STAGE_ANNOTATORS = 4
STAGE_MASK = 5
STAGE_AI = 6
STAGE_CORRECTNESS = 7
STAGE_EMBEDDING = 8
STAGE_PROJECTION = 9

EMBEDDING_FAMILIES = ("a", "b")
MANIFEST_FORMAT = "expert-router-cohort-manifest"


def row_rng(seed: int, stage: int, row: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, row])


@dataclass
class GeneratedCohort:
    table: CohortTable
    embeddings: pd.DataFrame
    manifest: Dict
    profiles: List[ExpertProfile] = field(default_factory=list)
    report: DiagnosticReport = None


def split_sizes(n: int, fractions: Dict[str, float]) -> Dict[str, int]:
    n_train = int(round(n * fractions["train"]))
    n_val = int(round(n * fractions["val"]))
    return {"train": n_train, "val": n_val, "test": n - n_train - n_val}


def _mixture_draw(rng: np.random.Generator, components: List[List[float]]) -> float:
    weights = np.array([c[0] for c in components], dtype=np.float64)
    k = int(rng.choice(len(components), p=weights / weights.sum()))
    return float(rng.beta(components[k][1], components[k][2]))


def _sample_anatomy(rng: np.random.Generator, y: int, spec: GenerationSpec):
    """Base (disc, cup) parameter rows (w, h, theta, cx, cy)"""
    a = spec.anatomy
    h_d = math.exp(rng.normal(a.disc_height_log_mean, a.disc_height_log_sd))
    w_d = h_d * rng.uniform(a.disc_aspect_low, a.disc_aspect_high)
    th_d = rng.uniform(-a.max_rotation, a.max_rotation)
    vd_d = float(vertical_diameter(w_d, h_d, th_d))
    target = _mixture_draw(rng, a.vcdr_positive if y == 1 else a.vcdr_negative)
    rho_c = rng.uniform(a.cup_aspect_low, a.cup_aspect_high)
    th_c = rng.uniform(-a.max_rotation, a.max_rotation)
    # VD(rho h, h, theta) = h sqrt(rho^2 sin^2 + cos^2)
    h_c = target * vd_d / math.sqrt(rho_c ** 2 * math.sin(th_c) ** 2 + math.cos(th_c) ** 2)
    offset = rng.normal(0.0, a.center_offset_sd * vd_d, size=2)
    disc = np.array([w_d, h_d, th_d, 0.0, 0.0])
    cup = np.array([rho_c * h_c, h_c, th_c, offset[0], offset[1]])
    return disc, cup


def _perturb(rng: np.random.Generator, disc: np.ndarray, cup: np.ndarray, sigma: float, m: int):
    """Per-annotator copies of the base ellipses, shape (m, 5) each"""
    vd_d = float(vertical_diameter(disc[0], disc[1], disc[2]))
    out = []
    for base in (disc, cup):
        e = np.tile(base, (m, 1))
        e[:, :2] *= np.exp(rng.normal(0.0, sigma, size=(m, 2)))
        e[:, 2] += rng.normal(0.0, sigma, size=m)
        e[:, 3:] += rng.normal(0.0, sigma * vd_d, size=(m, 2))
        out.append(e)
    return out[0], out[1]


def generate_cohort(spec: GenerationSpec, report: DiagnosticReport = None) -> GeneratedCohort:
    report = ensure_report(report)
    seed = spec.seed
    m = spec.n_experts
    blocks = [e.block for e in spec.experts]

    # row layout and splits
    cohort_of, split_of, local_of = [], [], []
    for ci, c in enumerate(spec.cohorts):
        sizes = dict(c.split_counts) if c.split_counts is not None else split_sizes(c.total(), spec.split_fractions)
        labels = sum(([s] * sizes.get(s, 0) for s in ("train", "val", "test")), [])
        perm = np.random.default_rng([seed, STAGE_SPLIT, ci]).permutation(len(labels))
        cohort_of += [ci] * len(labels)
        split_of += [labels[p] for p in perm]
        local_of += list(range(len(labels)))
    n = len(cohort_of)
    cohort_of = np.array(cohort_of)
    split_of = np.array(split_of)
    simulated = np.array([spec.cohorts[ci].label_source == "simulated" for ci in cohort_of])

    panel = np.zeros((n, m), dtype=bool)
    for i in range(n):
        c = spec.cohorts[cohort_of[i]]
        if not simulated[i]:
            continue
        if spec.mask_regime == "uniform":
            panel[i] = True
        else:
            panel[i] = [b == c.expert_block for b in blocks]

    y = np.zeros(n, dtype=np.int64)
    disc = np.zeros((n, 5))
    cup = np.zeros((n, 5))
    ann_disc = np.zeros((n, m, 5))
    ann_cup = np.zeros((n, m, 5))
    mask = np.zeros((n, m), dtype=bool)
    for i in range(n):
        c = spec.cohorts[cohort_of[i]]
        y[i] = int(row_rng(seed, STAGE_LABEL, i).random() < c.prevalence)
        disc[i], cup[i] = _sample_anatomy(row_rng(seed, STAGE_ANATOMY, i), y[i], spec)
        ann_disc[i], ann_cup[i] = _perturb(row_rng(seed, STAGE_ANNOTATORS, i), disc[i], cup[i],
                                           spec.anatomy.annotator_noise, m)
        if simulated[i]:
            rate = spec.uniform_availability if spec.mask_regime == "uniform" else c.availability
            mask[i] = panel[i] & (row_rng(seed, STAGE_MASK, i).random(m) < rate)

    vcdr, acdr, dec, vd_d = biomarker_arrays(disc, cup)
    a_vcdr, a_acdr, a_dec, a_vd = biomarker_arrays(ann_disc, ann_cup)
    ann_phi = geometry_features(a_vcdr, a_acdr, a_vd, a_dec)

    vcdr_med = vcdr.copy()
    for i in np.flatnonzero(simulated):
        use = mask[i] if mask[i].any() else panel[i]
        vcdr_med[i] = float(np.median(a_vcdr[i, use]))

    train = split_of == "train"
    val = split_of == "val"
    try:
        tau, youden_j = youden_threshold(vcdr_med[train], y[train])
    except DataError as e:
        raise ConfigError(f"infeasible generation spec: {e}") from e
    logger.info(f"Youden threshold {tau:.4f} (J={youden_j:.3f})")

    profiles = []
    for j, e in enumerate(spec.experts):
        fit_rows = np.flatnonzero(train & panel[:, j])
        cal_rows = np.flatnonzero(val & panel[:, j])
        if len(fit_rows) == 0:
            profiles.append(ExpertProfile(name=e.name, w=np.zeros(5), T=1.0, se=e.se, sp=e.sp,
                                          alpha=e.alpha, gamma=e.gamma))
            continue
        try:
            fit = fit_evidence_model(ann_phi[fit_rows, j], y[fit_rows], report=report, name=e.name)
        except DataError as err:
            raise ConfigError(f"infeasible generation spec: {err}") from err
        T = 1.0
        if len(cal_rows):
            T = calibrate_temperature(ann_phi[cal_rows, j] @ fit.w, y[cal_rows], report=report, name=e.name).T
        profiles.append(ExpertProfile(name=e.name, w=fit.w, T=T, se=e.se, sp=e.sp, alpha=e.alpha, gamma=e.gamma))

    g = spec.difficulty
    beta = case_difficulty(vcdr_med, tau, g.kappa_diff)
    expert_labels = np.full((n, m), np.nan)
    k_min_used = {}
    for i in np.flatnonzero(simulated):
        idx = np.flatnonzero(panel[i])
        if len(idx) == 0:
            continue
        phi = np.empty(len(idx))
        for t, j in enumerate(idx):
            p = profiles[j]
            if spec.experts[j].fixed_accuracy is not None:
                phi[t] = spec.experts[j].fixed_accuracy
                continue
            p_cal = p.calibrated(ann_phi[i, j])
            se_i, sp_i = operating_points(p_cal, beta[i], p.se, p.sp, p.alpha, p.gamma, g.rho_ref, g.b, g.d)
            phi[t] = success_probability(y[i], se_i, sp_i)
        k_min = g.k_min if g.k_min is not None else math.ceil(len(idx) / 3)
        k_min = min(k_min, len(idx))
        k_min_used[spec.cohorts[cohort_of[i]].name] = k_min
        c = conditional_correctness_sampler(phi, k_min, row_rng(seed, STAGE_CORRECTNESS, i))
        labels = instantiate_expert_labels(y[i], c)
        expert_labels[i, idx] = np.where(mask[i, idx], labels, np.nan)

    # frozen-AI simulation
    z = np.zeros(n)
    quality = np.zeros(n)
    ood_raw = np.zeros(n)
    for i in range(n):
        c = spec.cohorts[cohort_of[i]]
        rng = row_rng(seed, STAGE_AI, i)
        quality[i] = rng.uniform(0.0, 0.3)
        if rng.random() < c.quality_contamination:
            quality[i] = rng.uniform(0.5, 1.0)
        ood_raw[i] = c.ood_shift + rng.normal()
        z[i] = c.ai_scale * (vcdr[i] - tau) + c.ai_shift + rng.normal(0.0, c.ai_noise * (1.0 + quality[i]))
    sd = ood_raw.std()
    vim = (ood_raw - ood_raw.mean()) / (sd if sd > 0 else 1.0)
    prob = expit(z)

    # embeddings: two noisy random projections of standardised geometry
    geom = np.stack([vcdr, acdr, dec], axis=1)
    gsd = geom.std(axis=0)
    geom = (geom - geom.mean(axis=0)) / np.where(gsd > 0, gsd, 1.0)
    noise = np.stack([row_rng(seed, STAGE_EMBEDDING, i).normal(0.0, spec.embedding_noise,
                                                               size=(len(EMBEDDING_FAMILIES), spec.embedding_dim))
                      for i in range(n)])
    emb = {}
    for f, fam in enumerate(EMBEDDING_FAMILIES):
        proj = np.random.default_rng([seed, STAGE_PROJECTION, f]).normal(size=(geom.shape[1], spec.embedding_dim))
        emb[fam] = l2_normalize(geom @ proj + noise[:, f])

    pool = np.flatnonzero(simulated & train)
    ids = [f"{spec.cohorts[ci].name}_{k:05d}" for ci, k in zip(cohort_of, local_of)]
    for i in np.flatnonzero(~simulated):
        res = retrieve_pseudo_labels([emb[f][i] for f in EMBEDDING_FAMILIES],
                                     [emb[f][pool] for f in EMBEDDING_FAMILIES],
                                     y[pool], expert_labels[pool], int(y[i]), k=spec.retrieval_k,
                                     report=report, query_id=ids[i])
        expert_labels[i] = res.labels
        mask[i] = ~np.isnan(res.labels)

    frame = pd.DataFrame({
        "id": ids,
        "cohort": [spec.cohorts[ci].name for ci in cohort_of],
        "y": y,
        "logit_0": -z / 2.0,
        "logit_1": z / 2.0,
        "prob_1": prob,
        "vim_risk_z": vim,
        "quality_risk": quality,
        "uncertainty": 1.0 - np.maximum(prob, 1.0 - prob),
        "vCDR": np.clip(vcdr, 0.0, 1.5),
        "aCDR": np.clip(acdr, 0.0, 1.5),
    })
    for j in range(m):
        frame[expert_column(j)] = pd.array([pd.NA if np.isnan(v) else int(v) for v in expert_labels[:, j]],
                                           dtype="Int64")
    frame["split"] = split_of
    globals_ = {"kappa_diff": g.kappa_diff, "tau_youden": tau, "rho_ref": g.rho_ref, "b": g.b, "d": g.d,
                "k_min": g.k_min}
    table = CohortTable(frame=frame, n_experts=m, globals=globals_)

    emb_frame = pd.DataFrame({"id": ids})
    for fam in EMBEDDING_FAMILIES:
        for t in range(spec.embedding_dim):
            emb_frame[f"emb_{fam}_{t}"] = emb[fam][:, t]

    manifest = _manifest(spec, table, profiles, tau, youden_j, k_min_used)
    return GeneratedCohort(table=table, embeddings=emb_frame, manifest=manifest, profiles=profiles, report=report)


def _manifest(spec: GenerationSpec, table: CohortTable, profiles: List[ExpertProfile], tau: float,
              youden_j: float, k_min_used: Dict[str, int]) -> Dict:
    frame = table.frame
    labels = table.expert_labels()
    y = table.labels()
    experts = []
    for j, (e, p) in enumerate(zip(spec.experts, profiles)):
        obs = ~np.isnan(labels[:, j])
        acc = float((labels[obs, j] == y[obs]).mean()) if obs.any() else None
        experts.append({"name": e.name, "block": e.block, "column": expert_column(j),
                        "w": [float(v) for v in p.w], "T": float(p.T), "se": e.se, "sp": e.sp,
                        "n_observed": int(obs.sum()), "accuracy": acc})
    per_cohort = {}
    for name, sub in frame.groupby("cohort", sort=False):
        per_cohort[str(name)] = {s: int((sub["split"] == s).sum()) for s in ("train", "val", "test")}
    return {
        "format": MANIFEST_FORMAT,
        "spec_hash": config_hash(spec),
        "seed": spec.seed,
        "n_rows": len(frame),
        "n_experts": table.n_experts,
        "splits": {s: int((frame["split"] == s).sum()) for s in ("train", "val", "test")},
        "cohorts": per_cohort,
        "youden_tau": tau,
        "youden_j": youden_j,
        "k_min": k_min_used,
        "globals": table.globals,
        "experts": experts,
    }


def sidecar_paths(out_path: FILE_PATH) -> Dict[str, str]:
    out_path = os.fsdecode(out_path)
    stem = out_path[:-4] if out_path.endswith(".csv") else out_path
    return {"embeddings": stem + ".embeddings.csv", "manifest": stem + ".manifest.json"}


def write_generated(gen: GeneratedCohort, out_path: FILE_PATH) -> Dict[str, str]:
    """
    Write cohort CSV, embedding sidecar and manifest; returns the paths
    """
    write_cohort_csv(gen.table, out_path)
    paths = sidecar_paths(out_path)
    gen.embeddings.to_csv(paths["embeddings"], index=False, float_format="%.12g", lineterminator="\n")
    with open(paths["manifest"], "w") as stream:
        json.dump(gen.manifest, stream, sort_keys=True, indent=2)
        stream.write("\n")
    logger.info(f"Wrote embeddings to {paths['embeddings']} and manifest to {paths['manifest']}")
    return dict(paths, cohort=os.fsdecode(out_path))
