from .costs import ClinicalCosts, clinical_costs, routing_loss, routing_loss_grad
from .groups import GroupAssignment, apply_groups, assign_groups, penalty_keys
from .priors import PriorTree, build_prior_tree, prior_matrix, prior_tree_report
from .penalties import gsdp_penalty, rank_js_penalty
from .lagrangian import ALState, augmented_lagrangian, update_multiplier
from .total import ObjectiveContext, ObjectiveValue, make_context, total_objective
