"""Multi-maneuver scoring and coherence evaluation for driving trajectory planners."""

from __future__ import annotations

from .actions import (
    AccelClass,
    ControlParams,
    IntervalActions,
    SteerClass,
    classify_actions,
    rollout,
    rollout_controls,
)
from .augment import EKFSmoother, KalmanConfig, SpeedRetimer, ekf_smooth, retime_speed, wrong_speed_references
from .coherence import (
    CentroidSet,
    CoherenceResult,
    MockEmbeddingProvider,
    ReasoningTrace,
    RocchioClassifier,
    build_centroids,
    coherence_score,
    provider_from_endpoint,
)
from .dataset import (
    PredictionRecord,
    Scenario,
    ScenarioType,
    load_corpus,
    load_predictions,
    save_corpus,
    save_predictions,
)
from .exceptions import ManeuverEvalError
from .mms import (
    MmsCase,
    MmsResult,
    MultiManeuverScorer,
    Reference,
    ReferenceCategory,
    ReferenceSet,
    pearson_and_fit,
    score,
)
from .prompts import PromptMode, parse_completion, render
from .trajectory import Trajectory, l2_error

__version__ = "0.1.0"

__all__ = [
    "AccelClass",
    "CentroidSet",
    "CoherenceResult",
    "ControlParams",
    "EKFSmoother",
    "IntervalActions",
    "KalmanConfig",
    "ManeuverEvalError",
    "MmsCase",
    "MmsResult",
    "MockEmbeddingProvider",
    "MultiManeuverScorer",
    "PredictionRecord",
    "PromptMode",
    "ReasoningTrace",
    "Reference",
    "ReferenceCategory",
    "ReferenceSet",
    "RocchioClassifier",
    "Scenario",
    "ScenarioType",
    "SpeedRetimer",
    "SteerClass",
    "Trajectory",
    "build_centroids",
    "classify_actions",
    "coherence_score",
    "ekf_smooth",
    "l2_error",
    "load_corpus",
    "load_predictions",
    "parse_completion",
    "pearson_and_fit",
    "provider_from_endpoint",
    "render",
    "retime_speed",
    "rollout",
    "rollout_controls",
    "save_corpus",
    "save_predictions",
    "score",
    "wrong_speed_references",
]
