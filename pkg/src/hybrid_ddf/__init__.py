"""Distributed multi-robot semantic SLAM with hybrid beliefs."""
from .errors import (
    ConfigurationError,
    ContractViolation,
    DecodeError,
    HybridDDFError,
    LoadError,
    RelinearizationRequired,
    SamplingUnavailable,
    UnderConstrainedError,
)
from .geometry import Pose2, between, compose, inverse, sample_pose_noise, wrap_angle
from .gaussian import (
    GaussianDensity,
    VariableKey,
    divide,
    evaluate_density,
    marginalize,
    multiply,
    object_key,
    robot_key,
    sample,
)
from .graph import BetweenFactor, FactorGraph, LinearFactor, PriorFactor, SemanticFactor, add_factor, optimize
from .classifier import (
    ConstantModel,
    LookupModel,
    SimulationModel,
    load_lookup_model,
    predict,
    sample_semantic,
    semantic_log_likelihood,
)
from .hybrid import (
    ClassRealization,
    HybridBelief,
    Hypothesis,
    StepInputs,
    class_marginal,
    expand_for_new_objects,
    local_update,
    pose_summary,
    prune,
)

from .fusion import (
    ExternalUpdate,
    Stack,
    StackSlot,
    build_own_slot,
    compute_external_update,
    distributed_update,
    merge_stacks,
)
from .wire import deserialize_stack, serialize_stack
from .scenario import ScenarioConfig
from .simulator import run

__version__ = "0.1.0"

__all__ = [
    "BetweenFactor",
    "ClassRealization",
    "ConfigurationError",
    "ConstantModel",
    "ContractViolation",
    "DecodeError",
    "ExternalUpdate",
    "FactorGraph",
    "GaussianDensity",
    "HybridBelief",
    "HybridDDFError",
    "Hypothesis",
    "LinearFactor",
    "LoadError",
    "LookupModel",
    "Pose2",
    "PriorFactor",
    "RelinearizationRequired",
    "SamplingUnavailable",
    "ScenarioConfig",
    "SemanticFactor",
    "SimulationModel",
    "Stack",
    "StackSlot",
    "StepInputs",
    "UnderConstrainedError",
    "VariableKey",
    "add_factor",
    "between",
    "build_own_slot",
    "class_marginal",
    "compose",
    "compute_external_update",
    "deserialize_stack",
    "distributed_update",
    "divide",
    "evaluate_density",
    "expand_for_new_objects",
    "inverse",
    "load_lookup_model",
    "local_update",
    "marginalize",
    "merge_stacks",
    "multiply",
    "object_key",
    "optimize",
    "pose_summary",
    "predict",
    "prune",
    "robot_key",
    "run",
    "sample",
    "sample_pose_noise",
    "sample_semantic",
    "semantic_log_likelihood",
    "serialize_stack",
    "wrap_angle",
]
