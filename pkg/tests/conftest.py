"""Shared fixtures: small cameras, envelopes, field configs and on-disk datasets."""

import os

import numpy as np
import pytest

from field import FieldConfig
from geometry import Camera, SceneEnvelope, look_at
from sgm import write_prior
from synth import coarse_dem_prior, default_envelope, make_dataset, make_scene
from trainer import TrainConfig


def nadir_camera(altitude=1500.0, size=32, focal=100.0, x=0.0, y=0.0) -> Camera:
    rotation, translation = look_at((x, y, altitude), (x, y, 0.0), up=(0.0, 1.0, 0.0))
    return Camera(focal, size / 2, size / 2, size, size, rotation, translation)


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(
        iterations=3,
        batch_size=64,
        lr=5e-3,
        n_stratified=8,
        n_guided=8,
        n_freq_pos=4,
        n_freq_dir=2,
        width=16,
        depth=2,
        skip=1,
        log_period=1,
        checkpoint_period=2,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def envelope():
    return SceneEnvelope([-50.0, -50.0, 0.0], [50.0, 50.0, 100.0])


@pytest.fixture
def camera():
    return nadir_camera()


@pytest.fixture
def tiny_field():
    return FieldConfig(n_freq_pos=2, n_freq_dir=1, width=8, depth=2, skip=1, activation="sine")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def urban_dataset(tmp_path_factory):
    """32x32 urban dataset with coarse-DEM priors for both train views."""
    root = tmp_path_factory.mktemp("urban")
    data_dir = os.path.join(root, "data")
    prior_dir = os.path.join(root, "priors")
    scene = make_scene("urban", size=32, seed=5)
    cameras = make_dataset(scene, n_views=2, out_dir=data_dir, image_size=32, seed=5, kind="urban")

    for name in ("view0", "view1"):
        prior = coarse_dem_prior(scene, cameras[name].scaled(4), default_envelope(), smoothing=1.0, corr=0.8)
        write_prior(prior_dir, name, prior)
    return data_dir, prior_dir
