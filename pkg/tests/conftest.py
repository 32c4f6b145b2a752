"""Shared fixtures: tiny run configurations, in-memory storage, precision.

The tiny configuration renders 32x32 clips of 24 frames and trains
networks a few channels wide, so the whole pipeline runs in seconds.
"""

import copy
import uuid

import numpy as np
import pytest
import yaml

from genro_vad.autodiff.tensor import get_precision, precision, set_precision
from genro_vad.config import RunConfig
from genro_vad.pipeline import Pipeline
from genro_vad.storage import RunStorage

TINY = {
    "seed": 3,
    "precision": "float64",
    "data": {
        "frame_height": 32,
        "frame_width": 32,
        "num_frames": 24,
        "train_scenarios": 2,
        "test_scenarios": 2,
        "braking_onset": [6, 12],
        "speed_changes": 1,
    },
    "flow": {"levels": 2, "iterations": 10},
    "cubes": {"t_len": 3, "size": 8, "train_stride": 2},
    "memae": {"widths": [2, 3, 4], "num_slots": 5, "epochs": 1, "batch_size": 16},
    "cvae": {"widths": [2, 3, 4], "z_dim": 3, "epochs": 1, "batch_size": 16},
    "finetune": {"epochs": 1, "batch_size": 16},
    "eval": {"heatmaps_per_scenario": 1},
}


@pytest.fixture
def tiny_dict():
    """Plain mapping of the tiny configuration (deep-copied per test)."""
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_config(tiny_dict):
    """Tiny, fully validated run configuration."""
    return RunConfig.from_dict(tiny_dict)


@pytest.fixture
def memory_storage():
    """Run directory in fsspec's memory filesystem, unique per test."""
    storage = RunStorage(f"/vad-{uuid.uuid4().hex}", protocol="memory")
    yield storage
    storage.delete("")


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Run the test with float64 tensors."""
    with precision("float64"):
        yield


@pytest.fixture(autouse=True)
def restore_precision():
    """Leave the global precision as each test found it."""
    previous = get_precision()
    yield
    set_precision(previous)


def _completed_run() -> tuple:
    """Run every stage of the tiny configuration in a fresh memory run directory."""
    config = RunConfig.from_dict(copy.deepcopy(TINY))
    storage = RunStorage(f"/vad-run-{uuid.uuid4().hex}", protocol="memory")
    previous = get_precision()
    try:
        Pipeline(storage, config).run_all()
    finally:
        set_precision(previous)
    return storage, config


@pytest.fixture(scope="session")
def completed_run():
    """Storage and configuration of a finished tiny run, shared read-only."""
    storage, config = _completed_run()
    yield storage, config
    storage.delete("")


@pytest.fixture
def fresh_run():
    """A second finished tiny run, built for the calling test alone."""
    storage, config = _completed_run()
    yield storage, config
    storage.delete("")


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    """The tiny configuration written as a YAML file."""
    path = tmp_path_factory.mktemp("config") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path
