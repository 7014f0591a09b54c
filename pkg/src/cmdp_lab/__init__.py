"""Model-based learning for linear contextual MDPs on exactly solvable instances."""

from cmdp_lab.agents import AgentConfig, RunLog, run_algorithm1, run_algorithm2
from cmdp_lab.bonuses import BonusParams
from cmdp_lab.errors import (
    AllModelsImpossible,
    CMDPLabError,
    ConfigError,
    DimMismatch,
    GenerationFailed,
    InvalidInstance,
    InvalidKernel,
    MissingN,
)
from cmdp_lab.model import (
    ContextSpace,
    Dims,
    FeatureSpec,
    InstanceSpec,
    ModelClass,
    ModelKind,
    Trajectory,
    WeightSpec,
    build_tabular,
    compute_pmin_pmax,
    generate_instance,
    sample_context,
    sample_episode,
)

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "BonusParams",
    "RunLog",
    "run_algorithm1",
    "run_algorithm2",
    "AllModelsImpossible",
    "CMDPLabError",
    "ConfigError",
    "ContextSpace",
    "DimMismatch",
    "Dims",
    "FeatureSpec",
    "GenerationFailed",
    "InstanceSpec",
    "InvalidInstance",
    "InvalidKernel",
    "MissingN",
    "ModelClass",
    "ModelKind",
    "Trajectory",
    "WeightSpec",
    "build_tabular",
    "compute_pmin_pmax",
    "generate_instance",
    "sample_context",
    "sample_episode",
]
