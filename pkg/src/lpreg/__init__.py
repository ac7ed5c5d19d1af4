"""Desk-scale RLVR lab for low-probability regularization (Lp-Reg) and GRPO-family baselines."""

from .advantage import AdvantageSet, broadcast_advantage, group_advantages
from .config import ExperimentConfig, load_config
from .objective import ObjectiveConfig, ablation_loss, baseline_loss, batch_delta, batch_loss, lp_reg_token_loss
from .policy import PolicyParams, Vocabulary, default_vocabulary, init_params, next_token_distribution
from .proxy import NoiseThresholdRule, build_proxy, forward_kl, resolve_threshold, reverse_kl

__version__ = "0.1.0"
