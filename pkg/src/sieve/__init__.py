"""Self-guided visual evidence discovery, evidence-insertion rollouts, and a
GRPO-style training harness on a deterministic toy multimodal transformer."""

from .model import Model, ModelConfig, build_model, forward, grad_scalar_logit
from .grounding import DiscoveryParams, EvidenceSnapshot, discover_evidence
from .reward import RewardBreakdown, RewardWeights, grpo_advantages, score_trajectory
from .rollout import SamplerParams, Trajectory, run_rollout
from .trainer import TrainConfig, train

__all__ = [
    "Model",
    "ModelConfig",
    "build_model",
    "forward",
    "grad_scalar_logit",
    "DiscoveryParams",
    "EvidenceSnapshot",
    "discover_evidence",
    "RewardBreakdown",
    "RewardWeights",
    "grpo_advantages",
    "score_trajectory",
    "SamplerParams",
    "Trajectory",
    "run_rollout",
    "TrainConfig",
    "train",
]
