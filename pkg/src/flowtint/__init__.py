"""Two-stage flow-matching colour preset transfer at toy scale."""

from .condnet import (COLD_START, POST_TRAINING, BranchLayout, ConditioningContext, NetConfig,
                      VelocityField, attach_adapter, build_mask, load_checkpoint, save_checkpoint)
from .flow import euler_sample, fm_loss, interpolate, target_velocity
from .presets import Preset, apply_preset
from .reward import ScoreDistribution, expected_score, normalize_group, proxy_score

__version__ = "0.1.0"
