import pytest

from ckbsim.pipeline import generate_dataset
from ckbsim.scene import small_config


@pytest.fixture(scope="session")
def small_dataset():
    """24 samples in a 120 m world rendered at 32 x 32."""
    return generate_dataset(small_config(), n=24, seed=3, resolution=32)
