import os

import numpy as np
import pytest

from metaboot import autodiff as ad


def pytest_collection_modifyitems(config, items):
    if os.environ.get("METABOOT_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="long acceptance run; set METABOOT_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def graph():
    with ad.Graph("test") as g:
        yield g
