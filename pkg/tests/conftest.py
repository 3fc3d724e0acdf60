import numpy as np
import pytest

from barelyseg import segnet
from barelyseg.phantom import PhantomConfig, generate_phantom
from barelyseg.trainer import TrainerConfig
from barelyseg.voxel import annotate, make_training_sets

TINY_PHANTOM = PhantomConfig(dims=(10, 20, 20))


def tiny_config(**kw) -> TrainerConfig:
    base = dict(
        lr=5e-3,
        epochs=1,
        crop=(8, 16, 16),
        segnet=segnet.SegNetConfig(base_channels=2),
        iterations_per_epoch=2,
        dtype="float64",
    )
    base.update(kw)
    return TrainerConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    pairs = [generate_phantom(100 + i, TINY_PHANTOM) for i in range(4)]
    vol, lab = pairs[0]
    k = int(np.argmax((lab.data > 0).sum(axis=(1, 2))))
    lset, uset = make_training_sets([(vol, annotate(lab, k))], [p[0] for p in pairs[1:3]])
    val = ([pairs[3][0]], [pairs[3][1]])
    return lset, uset, val, pairs


# acceptance criteria report one line each at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
