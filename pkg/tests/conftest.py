import numpy as np
import pytest

from mcaer.data import load_dataset
from mcaer.synthetic import generate_synthetic


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Synthetic dataset with 8 scenes per class (56 images)."""
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(8, 0, root)
    return root


@pytest.fixture(scope="session")
def synth_spec(synth_dir):
    from mcaer.data import DatasetSpec

    return DatasetSpec(str(synth_dir), split=None)


@pytest.fixture(scope="session")
def synth_refs(synth_spec):
    return load_dataset(synth_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
