"""Face embeddings that separate appearance from geometry.

The package builds matched face pairs by warping one face onto the landmark
layout of another, then trains a small convolutional network whose embedding
is split into an appearance half and a geometry half. Losses, gradients, and
the optimizer are implemented directly on numpy arrays so every number in a
run is reproducible from the seed alone.
"""

from .geometry import (
    CanonicalFrame,
    DegenerateShapeError,
    LandmarkSet,
    NeighborIndex,
    NoNeighborError,
    SimilarityTransform,
    align_landmarks,
    landmark_disparity,
    mean_reference_shape,
    select_geometric_neighbor,
)
from .config import ConfigError, RunConfig, load_run_config
from .evaluate import (
    EvalReport,
    attribute_probe,
    disentanglement_probe,
    evaluate_model,
    lambda_sweep,
    make_verification_pairs,
    nearest_neighbor_gallery,
    rank1_identification,
    verification_accuracy,
    verification_roc,
)
from .images import ImageBuffer, load_image, save_image
from .losses import EmbeddingTriple, LossConfig, total_loss
from .net import NetConfig, NetParams, forward, backward, grad_check, init_params
from .records import FaceRecord
from .synth import IdentitySpec, generate_dataset, load_dataset
from .tps import SingularConfigurationError, TpsTransform, fit_tps, eval_tps, warp_image
from .train import TrainConfig, build_triplets, train

__all__ = [
    "CanonicalFrame",
    "ConfigError",
    "DegenerateShapeError",
    "EmbeddingTriple",
    "EvalReport",
    "FaceRecord",
    "IdentitySpec",
    "ImageBuffer",
    "LandmarkSet",
    "LossConfig",
    "NeighborIndex",
    "NetConfig",
    "NetParams",
    "NoNeighborError",
    "RunConfig",
    "SimilarityTransform",
    "SingularConfigurationError",
    "TpsTransform",
    "TrainConfig",
    "align_landmarks",
    "attribute_probe",
    "backward",
    "build_triplets",
    "disentanglement_probe",
    "eval_tps",
    "evaluate_model",
    "fit_tps",
    "forward",
    "generate_dataset",
    "grad_check",
    "init_params",
    "lambda_sweep",
    "landmark_disparity",
    "load_dataset",
    "load_image",
    "load_run_config",
    "make_verification_pairs",
    "mean_reference_shape",
    "nearest_neighbor_gallery",
    "rank1_identification",
    "save_image",
    "select_geometric_neighbor",
    "total_loss",
    "train",
    "verification_accuracy",
    "verification_roc",
    "warp_image",
]

__version__ = "0.1.0"
