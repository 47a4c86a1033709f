"""Long-context causal chunk distillation on a linear-Gaussian video stand-in."""

from .config import ConfigError, ExperimentConfig
from .distill import cdmd_gradient, dmd_gradient, kl_decomposition_check, kl_gaussian
from .evaluation import consistency_curve, effective_context_probe, window_consistency
from .memory import CacheConfig, SlowFastCache
from .model import AnalyticTeacher, ChunkNet, NetConfig, NetScore
from .numerics import GaussianDist, SceneProcess, make_schedule, substream
from .rollout import StageConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AnalyticTeacher", "CacheConfig", "ChunkNet", "ConfigError", "ExperimentConfig", "GaussianDist",
    "NetConfig", "NetScore", "SceneProcess", "SlowFastCache", "StageConfig", "cdmd_gradient",
    "consistency_curve", "dmd_gradient", "effective_context_probe", "kl_decomposition_check", "kl_gaussian",
    "make_schedule", "substream", "train_stage1", "train_stage2", "window_consistency",
]
