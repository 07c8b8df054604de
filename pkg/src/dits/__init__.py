"""Diffusion-based trajectory stitching for offline RL data augmentation."""

from .config import DitsConfig
from .data import (Dataset, NormStats, Trajectory, Transition, denormalize,
                   load_dataset, normalize, save_dataset, trajectory_return,
                   window_return)
from .diffusion import (ClampSpec, NoiseSchedule, PairDiffusionModel,
                        SamplerParams, WindowDiffusionModel, denoise_step,
                        forward_sample, guided_epsilon, impute_reward,
                        make_schedule, sample_window, sample_windows)
from .envs import (Bridge2D, Chain1D, EnvSpec, PolicyTier, StateOnlyEnv,
                   make_env, state_only, synthesize_offline_dataset)
from .evaluation import (BehavioralCloningPolicy, EvalReport,
                         SimilarityReport, correlation_similarity,
                         evaluate_policy, ks_marginal, ks_statistic,
                         normalized_score, similarity_report)
from .generation import (GenerationConfig, HistoryQueue, generate_batch,
                         generate_trajectory)
from .models import (GaussianDynamicsEnsemble, InverseDynamicsModel,
                     ModelBundle, TwinValueFunction)
from .nets import grad_check
from .pipeline import DitsAugmenter, run_ablation, run_dits, train_bundle
from .stitching import (StateIndex, StitchConfig, dynamics_criterion,
                        lambda_filter, neighborhood, select_candidate,
                        stitch_epoch, stitch_trajectory)

__version__ = "0.1.0"

__all__ = [
    "BehavioralCloningPolicy", "Bridge2D", "Chain1D", "ClampSpec", "Dataset",
    "DitsAugmenter", "DitsConfig", "EnvSpec", "EvalReport",
    "GaussianDynamicsEnsemble", "GenerationConfig", "HistoryQueue",
    "InverseDynamicsModel", "ModelBundle", "NoiseSchedule", "NormStats",
    "PairDiffusionModel", "PolicyTier", "SamplerParams", "SimilarityReport",
    "StateIndex", "StateOnlyEnv", "StitchConfig", "Trajectory", "Transition",
    "TwinValueFunction", "WindowDiffusionModel", "correlation_similarity",
    "denoise_step", "denormalize", "dynamics_criterion", "evaluate_policy",
    "forward_sample", "generate_batch", "generate_trajectory", "grad_check",
    "guided_epsilon", "impute_reward", "ks_marginal", "ks_statistic",
    "lambda_filter", "load_dataset", "make_env", "make_schedule",
    "neighborhood", "normalize", "normalized_score", "run_ablation",
    "run_dits", "sample_window", "sample_windows", "save_dataset",
    "select_candidate", "similarity_report", "state_only", "stitch_epoch",
    "stitch_trajectory", "synthesize_offline_dataset", "train_bundle",
    "trajectory_return", "window_return",
]
