from .cohort_table import CohortTable, DecisionState, read_cohort_csv, write_cohort_csv
from .biomarkers import Ellipse, EllipseAnnotation, structural_biomarkers
from .expert_models import (ExpertProfile, calibrate_temperature, fit_evidence_model,
                            operating_points, youden_threshold)
from .sampler import conditional_correctness_sampler, instantiate_expert_labels
from .retrieval import retrieve_pseudo_labels
from .generator import GeneratedCohort, generate_cohort, write_generated
