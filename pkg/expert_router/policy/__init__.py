from .policy_core import (ExpertMask, GateSample, AllocationDist, RoutingPolicy,
                          gumbel_sigmoid_gate, repair_support, masked_allocation,
                          conditional_allocation, assemble_policy, project_masked_simplex,
                          hard_action, action_mask, straight_through)
