from .outcomes import RoutedOutcomes, ai_only_outcomes, route_outcomes, uniform_random_outcomes
from .metrics import (ai_retention, collapse_diagnostics, concentration_metrics, confusion_metrics,
                      cost_metrics, deferral_rates, evaluate_outcomes, per_expert_table,
                      risk_stratified_costs)
from .report import MetricsReport, validate_metrics, write_report
from .evaluator import check_compatible, evaluate_checkpoint, route_split
