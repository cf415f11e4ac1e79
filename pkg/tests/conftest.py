import os

import pytest

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
SYNTH8 = os.path.join(FIXTURES, "synth8")


@pytest.fixture(scope="session")
def synth8():
    return SYNTH8
