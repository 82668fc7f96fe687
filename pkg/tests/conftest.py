import pytest

from streamtrack.numerics import ops


@pytest.fixture(autouse=True)
def _fresh_diagnostics():
    ops.reset_diagnostics()
    yield
