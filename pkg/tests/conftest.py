import pytest

from headsplat.synth import make_head_mesh


@pytest.fixture(scope="session")
def head_template():
    """Procedural low-poly head used across the suite."""
    return make_head_mesh()
