import numpy as np
import pytest

from cdvae.tensor import default_dtype


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


def rand(rng, *shape):
    return rng.standard_normal(shape)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 identities x 4 views of 32x32 spinners."""
    from cdvae.data import SpinnerSpec, generate_spinner_dataset

    root = tmp_path_factory.mktemp("spin")
    generate_spinner_dataset(str(root), SpinnerSpec(size=32, views=4, identities=12, seed=3))
    return str(root)
