import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixtures import make_dataset, make_image_store, make_registry  # noqa: E402

from bidsbatch import registry  # noqa: E402
from bidsbatch.scriptgen import SubmitSpec  # noqa: E402


@pytest.fixture
def image_store(tmp_path):
    return make_image_store(tmp_path)


@pytest.fixture
def spec(tmp_path, image_store):
    reg = make_registry(tmp_path, image_store[1])
    return registry.find_spec(registry.load_registry(reg), "stubpipe")


@pytest.fixture
def dataset(tmp_path):
    return make_dataset(tmp_path / "archive")


@pytest.fixture
def submit(tmp_path):
    return SubmitSpec(partition="production", scratch_root=str(tmp_path / "scratch"))
