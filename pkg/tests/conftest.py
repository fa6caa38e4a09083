import numpy as np
import pytest

from pointad.config import smoke_config
from pointad.data.synthetic import generate_synthetic_sample
from pointad.encoder import make_backbone
from pointad.pipeline import prepare_many
from pointad.prompts import init_prompts


def small_config(**extra):
    """Smoke configuration shrunk to 56 x 56 renderings for fast unit tests."""
    return smoke_config({"render.size": [56, 56], "encoder.input_size": [56, 56], **extra})


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_backbone(small_cfg):
    return make_backbone(small_cfg.encoder)


@pytest.fixture(scope="session")
def small_samples(small_cfg, small_backbone):
    pcs = [generate_synthetic_sample("sphere", a, 1500, seed=i)
           for i, a in enumerate(("dent", "none", "bump", "crack"))]
    return prepare_many(pcs, small_backbone, small_cfg)


@pytest.fixture
def small_prompts(small_backbone):
    return init_prompts("object-agnostic", 12, seed=0, d_word=small_backbone.cfg.d_word,
                        backbone_id=small_backbone.backbone_id)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
