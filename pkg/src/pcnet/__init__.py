"""pcnet: predictive-coding recurrence for small convolutional classifiers.

The engine augments a feedforward backbone with generative feedback
decoders, iteratively refines layer representations across timesteps, and
benchmarks the effect on corruption and transfer-attack robustness.
"""

__version__ = "0.1.0"

from .bench import (
    MetricsRecord,
    corruption_error,
    mean_corruption_error,
    reconstruction_mse_curve,
    representation_distance_curve,
    transfer_attack_eval,
    tune_hyperparams,
)
from .builder import (
    BackboneSpec,
    ConfigError,
    NetworkSpec,
    build_network,
    default_decoder,
    init_weights,
    parse_config,
    serialize_config,
    validate_hyperparams,
)
from .data import Dataset, load_weights, read_idx, save_weights, synth_dataset
from .dynamics import (
    HyperParams,
    PCNetwork,
    PCNetworkState,
    PCoder,
    error_gradient,
    init_feedforward_sweep,
    pcoder_update,
    run_dynamics,
    step,
)
from .estimators import ConvNetClassifier, PredictiveCodingClassifier
from .noise import NoiseSpec, apply_noise, apply_noise_batch
from .train import TrainOpts, evaluate, train_backbone, train_feedback

__all__ = [
    "BackboneSpec",
    "ConfigError",
    "ConvNetClassifier",
    "Dataset",
    "HyperParams",
    "MetricsRecord",
    "NetworkSpec",
    "NoiseSpec",
    "PCNetwork",
    "PCNetworkState",
    "PCoder",
    "PredictiveCodingClassifier",
    "TrainOpts",
    "apply_noise",
    "apply_noise_batch",
    "build_network",
    "corruption_error",
    "default_decoder",
    "error_gradient",
    "evaluate",
    "init_feedforward_sweep",
    "init_weights",
    "load_weights",
    "mean_corruption_error",
    "parse_config",
    "pcoder_update",
    "read_idx",
    "reconstruction_mse_curve",
    "representation_distance_curve",
    "run_dynamics",
    "save_weights",
    "serialize_config",
    "step",
    "synth_dataset",
    "train_backbone",
    "train_feedback",
    "transfer_attack_eval",
    "tune_hyperparams",
    "validate_hyperparams",
]
