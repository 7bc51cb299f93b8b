import numpy as np
import pytest
import torch

from airwaykit.config import load_config
from airwaykit.synth import render_patch, sample_label


@pytest.fixture(scope="session", autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_config():
    return load_config(None)


@pytest.fixture(scope="session")
def clean_patch(default_config):
    """One noiseless render with a known label."""
    label = sample_label(default_config.synth, seed=123)
    return render_patch(label, default_config.synth, seed=123)


def assert_close(actual, expected, tol, label=""):
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    err = float(np.max(np.abs(actual - expected)))
    assert err <= tol, f"{label} |{actual} - {expected}| = {err} > {tol}"
