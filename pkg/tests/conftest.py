import numpy as np
import pytest

from reco.memory import build_store, normalize_rows
from reco.synthworld import WorldSpec, generate_world

SMALL_WORLD = dict(memory_size=3000, train_size=1024, eval_size=512, n_distractor_fine=8,
                   memory_on_task=0.5)


def unit_rows(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_store(rng):
    image, text = rng.standard_normal((200, 16)), rng.standard_normal((200, 16))
    return build_store(image, text, ids=np.arange(200) * 3 + 1)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldSpec(**SMALL_WORLD))


_TRAINED = {}
_WORLDS = {}


def default_world(seed=0):
    """Default world, cached for the whole session."""
    if seed not in _WORLDS:
        _WORLDS[seed] = generate_world(WorldSpec(seed=seed))
    return _WORLDS[seed]


def trained(world_seed=0, memory=None, tag="", **train_kwargs):
    """Train on the default world once per distinct configuration."""
    from reco.fusion import FusionConfig
    from reco.training import TrainConfig, train_fusion

    cfg = TrainConfig(**train_kwargs)
    key = (world_seed, tag, cfg)
    if key not in _TRAINED:
        world = default_world(world_seed)
        _TRAINED[key] = train_fusion(world.train, memory if memory is not None else world.memory,
                                     cfg, FusionConfig(),
                                     same_provenance=world.same_provenance)
    return _TRAINED[key]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
