"""Anatomical landmark detection: attentive feature-pyramid fusion with a
regression-voting decoder, plus dataset tooling, training harness, and
challenge-style metrics."""

from .afpf import Afpf, AfpfConfig, AttentionWeights, FeaturePyramid, PooledDescriptor, PredictionMaps
from .backbone import BackboneSpec, MultiLevelFeatures, extract_features, load_weights, save_weights
from .data import (
    CephImage,
    CoordTransform,
    Dataset,
    DatasetSplit,
    Direction,
    Frame,
    LandmarkSet,
    average_landmarks,
    generate_synthetic,
    load_sample,
    map_coords,
    open_dataset,
    resize_to_network,
    write_dataset,
)
from .decoder import ActivationMap, VoterSet, argmax_landmark, cast_votes, decode, select_voters
from .errors import (
    CephmarkError,
    ConfigError,
    ContractError,
    EmptyActivationError,
    FormatError,
    NumericalError,
)
from .metrics import EvaluationReport, aggregate, format_report, radial_errors
from .model import LandmarkNet, ModelConfig
from .targets import TargetConfig, TargetMaps, heat_loss, make_targets, offset_loss, total_loss
from .training import CheckpointManifest, TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Afpf",
    "AfpfConfig",
    "ActivationMap",
    "AttentionWeights",
    "BackboneSpec",
    "CephImage",
    "CephmarkError",
    "CheckpointManifest",
    "ConfigError",
    "ContractError",
    "CoordTransform",
    "Dataset",
    "DatasetSplit",
    "Direction",
    "EmptyActivationError",
    "EvaluationReport",
    "FeaturePyramid",
    "FormatError",
    "Frame",
    "LandmarkNet",
    "LandmarkSet",
    "ModelConfig",
    "MultiLevelFeatures",
    "NumericalError",
    "PooledDescriptor",
    "PredictionMaps",
    "TargetConfig",
    "TargetMaps",
    "TrainConfig",
    "VoterSet",
    "aggregate",
    "argmax_landmark",
    "average_landmarks",
    "cast_votes",
    "decode",
    "evaluate",
    "extract_features",
    "format_report",
    "generate_synthetic",
    "heat_loss",
    "load_checkpoint",
    "load_sample",
    "load_weights",
    "make_targets",
    "map_coords",
    "offset_loss",
    "open_dataset",
    "predict",
    "radial_errors",
    "resize_to_network",
    "save_checkpoint",
    "save_weights",
    "select_voters",
    "total_loss",
    "train",
    "write_dataset",
]
