import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from kitpose import numerics as nx  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64():
    with nx.precision("float64"):
        yield


CONFIG_DIR = Path(__file__).resolve().parent / "configs"

TINY_OVERRIDES = [
    "model.embed_dim=16",
    "model.n_layers=1",
    "model.heatmap_size=[8, 8]",
    "model.backbone_channels=6",
    "model.backbone_width=4",
    "model.prompt.n_prompts=2",
    "data.train_count=8",
    "data.val_count=4",
    "data.canvas_size=48",
    "schedule.epochs=1",
    "schedule.milestones=[]",
    "batch_size=4",
    'precision="float64"',
]


@pytest.fixture
def tiny_overrides():
    """17-keypoint synthetic run small enough for the fast suite."""
    return list(TINY_OVERRIDES)


@pytest.fixture
def tiny_config(tiny_overrides):
    from kitpose.config import load_config

    return load_config(CONFIG_DIR / "desk.toml", overrides=tiny_overrides, env={})


@pytest.fixture
def micro_config():
    from kitpose.config import load_config

    return load_config(CONFIG_DIR / "micro.toml", env={})
