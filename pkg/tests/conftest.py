"""Fixtures for the tests."""

import json
import os.path
import shutil
import tempfile

import pytest

from asdssl import dataio

SMALL_SYNTH = {
    "n_machines": 2,
    "clips_per_machine_source": 16,
    "clips_per_machine_target": 4,
    "clips_per_machine_test": 8,
    "clip_seconds": 1.0,
    "sample_rate": 8000,
    "anomaly_fraction_test": 0.5,
}

# Shrunken sizes so that a training run takes a few seconds on a CPU.
SMALL_CONFIG = {
    "synth": SMALL_SYNTH,
    "features": {
        "sample_rate": 8000,
        "stft_window": 256,
        "stft_hop": 128,
        "spectrogram_frames": 16,
        "spectrum_bins": 512,
    },
    "model": {
        "embedding_dim": 16,
        "spectrum_channels": [4, 8, 8],
        "spectrogram_channels": [4, 8],
        "hidden_dim": 16,
    },
    "heads": {"n_subclusters": 2},
    "train": {"epochs": 1, "batch_size": 8},
    "backend": {"k": 2},
    "eval": {"trials": 2},
}


def pytest_addoption(parser):
    """Add the --runslow option."""
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    """Register the slow marker."""
    config.addinivalue_line("markers", "slow: full-size runs, only with --runslow")


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless --runslow is given."""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(name="temp_dir")
def fixture_temp_dir():
    """Create a temporary directory and delete it after the test has run."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture(name="small_corpus", scope="session")
def fixture_small_corpus():
    """Generate a small synthetic corpus once per test session."""
    corpus_dir = tempfile.mkdtemp()
    dataio.generate_synthetic_corpus(dataio.SynthConfig(**SMALL_SYNTH, seed=3), corpus_dir)
    yield corpus_dir
    shutil.rmtree(corpus_dir)


@pytest.fixture(name="small_config_path")
def fixture_small_config_path(temp_dir):
    """Write the shrunken config to a JSON file."""
    path = os.path.join(temp_dir, "small.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(SMALL_CONFIG, f)
    return path
