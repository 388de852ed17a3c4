import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import zoo  # noqa: E402


@pytest.fixture(scope="session")
def zoo_models():
    return zoo.models()


@pytest.fixture(scope="session")
def eval_images():
    return zoo.eval_corpus()[1]
