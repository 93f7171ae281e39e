"""Log-density ratios between conditional flows from a single augmented ODE."""

__version__ = "0.1.0"

from .errors import (CheckpointError, ChecksumError, ConfigurationError, DomainError,
                     IntegrationError, RatioFlowError, TrainingDivergedError, VersionError)
from .fields import FieldProvider
from .flow_model import (ConditionSpec, FlowScoreModel, LabeledDataset, ModelConfig, TrainConfig,
                         load_checkpoint, model_field_provider, save_checkpoint, train)
from .oracles import GaussianSpec, analytic_log_ratio, mi_ground_truth, oracle_field_provider
from .ratio import (RatioRequest, RatioResult, SolverConfig, estimate_log_ratio,
                    naive_log_likelihood, naive_log_ratio, run_request)
from .schedules import Schedule

__all__ = [
    "CheckpointError", "ChecksumError", "ConditionSpec", "ConfigurationError", "DomainError",
    "FieldProvider", "FlowScoreModel", "GaussianSpec", "IntegrationError", "LabeledDataset",
    "ModelConfig", "RatioFlowError", "RatioRequest", "RatioResult", "Schedule", "SolverConfig",
    "TrainConfig", "TrainingDivergedError", "VersionError", "analytic_log_ratio",
    "estimate_log_ratio", "load_checkpoint", "mi_ground_truth", "model_field_provider",
    "naive_log_likelihood", "naive_log_ratio", "oracle_field_provider", "run_request",
    "save_checkpoint", "train",
]
