"""Shared fixtures built on the package's synthetic demo scenes."""

from __future__ import annotations

import pytest
import torch

from bodyreshape import body_model as bmod
from bodyreshape.demo import (  # noqa: F401  (re-exported for test modules)
    checker_background,
    keypoints_for,
    make_scene,
    render_person,
    scene_camera,
    upright_pose,
    write_scene_fixtures,
)

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def model():
    return bmod.build_synthetic_model()


@pytest.fixture(scope="session")
def calibration(model):
    return bmod.calibrate_semantic_map(model)


@pytest.fixture(scope="session")
def scene_record(model):
    return make_scene(model, seed=3, resolution=128)
