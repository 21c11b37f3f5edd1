from .features import (FeatureStats, StateBatch, batch_from_cohort, batch_from_states,
                       fit_feature_stats, standardize_features)
from .router_net import (ForwardTrace, RouterParams, build_router_state, init_params,
                         policy_backward, policy_forward)
from .adamw import AdamW
from .noise import NoiseStream
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
