import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from zsc.data import SyntheticSpec, generate_synthetic_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(num_classes=14, class_split=(8, 3, 3), images_per_split=(6, 3, 3),
                         image_size=(64, 80), objects_per_image=(3, 6), object_scale=(12.0, 16.0),
                         distractors_per_class=(1, 3), seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_spec):
    return generate_synthetic_dataset(tiny_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


MINI_CFG = os.path.join(os.path.dirname(__file__), "..", "configs", "mini.cfg")
TRAIN_STAGES = ("synth-data", "train-embed", "train-counter", "train-vae", "train-predictor")


def run_cli(*argv):
    from zsc.cli import main
    return main(list(argv))


@pytest.fixture(scope="session")
def mini_runs(tmp_path_factory):
    """Run root holding one completed pass of every training stage plus eval on the mini config."""
    root = tmp_path_factory.mktemp("runs")
    mp = pytest.MonkeyPatch()
    mp.setenv("ZSC_RUN_DIR", str(root))
    try:
        for stage in TRAIN_STAGES + ("eval",):
            assert run_cli(stage, "--config", MINI_CFG) == 0, stage
    finally:
        mp.undo()
    return root
