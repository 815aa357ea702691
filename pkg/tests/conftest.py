import os

import pytest

from sparseagg.synth import write_synthetic_cifar10
from sparseagg.train import load_cifar10


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """Directory with CIFAR-10 binaries.

    Points at SPARSEAGG_CIFAR_DIR when that holds the real dataset;
    otherwise writes the synthetic stand-in once per session.
    """
    env = os.environ.get("SPARSEAGG_CIFAR_DIR")
    if env and os.path.exists(os.path.join(env, "test_batch.bin")):
        return env
    path = tmp_path_factory.mktemp("cifar10")
    write_synthetic_cifar10(path, seed=0)
    return str(path)


@pytest.fixture(scope="session")
def small_data(cifar_dir):
    return load_cifar10(cifar_dir, train_subset=500, test_subset=500)


def config_path(name: str) -> str:
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return os.path.join(here, "configs", name)
