"""Shared fixtures: the reference config and a small trained pipeline."""

import pathlib

import numpy as np
import pytest

from pcnet import (
    TrainOpts,
    build_network,
    parse_config,
    synth_dataset,
    train_backbone,
    train_feedback,
)

CONFIG_PATH = pathlib.Path(__file__).resolve().parent.parent / "configs" / "tinynet3.toml"


@pytest.fixture(scope="session")
def tinynet_config_text():
    return CONFIG_PATH.read_text()


@pytest.fixture(scope="session")
def tinynet_spec(tinynet_config_text):
    return parse_config(tinynet_config_text)


@pytest.fixture(scope="session")
def random_network(tinynet_spec):
    """tinynet3 with fresh (untrained) weights; enough for exact contracts."""
    return build_network(tinynet_spec, seed=1)


@pytest.fixture(scope="session")
def trained_setup(tinynet_spec):
    """A modestly trained tinynet3 plus its train/test splits.

    Big enough for direction-of-effect checks, small enough to keep the
    non-acceptance suite quick.
    """
    train_ds = synth_dataset(seed=10, n=2000)
    test_ds = synth_dataset(seed=11, n=500)
    weights, _ = train_backbone(
        tinynet_spec, train_ds,
        TrainOpts(epochs=6, batch_size=64, learning_rate=0.05, seed=0),
    )
    network = build_network(tinynet_spec, weights)
    train_feedback(
        network, train_ds,
        TrainOpts(epochs=5, batch_size=64, learning_rate=1e-4, momentum=0.9, seed=1),
    )
    return network, train_ds, test_ds


def make_single_pcoder_config(predictor: str, alpha: float = 0.001) -> str:
    """Single-PCoder network on 1x8x8 input with an explicit decoder."""
    return f"""
name = "single"
input_size = [1, 8, 8]

[backbone]
head_start = 2
layers = [
  {{ type = "conv", out_channels = 4, kernel = 3, stride = 1, padding = 1 }},
  {{ type = "relu" }},
  {{ type = "flatten" }},
  {{ type = "dense", out_features = 3 }},
]

[[pcoders]]
module = 1
{predictor}
hyperparameters = {{ feedforward = 0.0, feedback = 0.0, pc = {alpha} }}
"""
