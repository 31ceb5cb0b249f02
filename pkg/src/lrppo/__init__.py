"""Label relevance ranking with a supervised actor, a pair reward model and
actor-critic fine-tuning driven by a partial-order policy ratio."""

from .autodiff import ScorerParams, Tape, adam_step, backward, mlp_forward
from .core import PPOConfig, collect_trajectories, ppo_iteration
from .data import (
    DatasetSplit,
    LabeledItem,
    PairSample,
    RankingInstance,
    build_splits,
    generate_synthetic,
    parse_letor,
    serialize_letor,
)
from .evaluation import MetricsRow, dcg_at_k, evaluate_model, ndcg_at_k, reward_accuracy
from .models import ActorModel, CriticModel, RewardModel, init_critic_from_reward
from .pipeline import ExperimentConfig, run_stage1, run_stage2, run_stage3, train_all

__version__ = "0.1.0"

__all__ = [
    "ActorModel",
    "CriticModel",
    "DatasetSplit",
    "ExperimentConfig",
    "LabeledItem",
    "MetricsRow",
    "PPOConfig",
    "PairSample",
    "RankingInstance",
    "RewardModel",
    "ScorerParams",
    "Tape",
    "adam_step",
    "backward",
    "build_splits",
    "collect_trajectories",
    "dcg_at_k",
    "evaluate_model",
    "generate_synthetic",
    "init_critic_from_reward",
    "mlp_forward",
    "ndcg_at_k",
    "parse_letor",
    "ppo_iteration",
    "reward_accuracy",
    "run_stage1",
    "run_stage2",
    "run_stage3",
    "serialize_letor",
    "train_all",
]
