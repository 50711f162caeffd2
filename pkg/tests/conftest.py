import numpy as np
import pytest

from gradient_diversity import data_io, network


def fd_gradient(f, x, h=1e-6):
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        out.flat[i] = (f(x + step) - f(x - step)) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def toy_ensemble():
    r = np.random.default_rng(11)
    return network.Ensemble([network.MlpModel.initialize((8, 6, 3), r) for _ in range(3)])


@pytest.fixture(scope="session")
def small_blobs():
    return data_io.synthetic_blobs(20, 3, 60, 0.15, 0)


@pytest.fixture(scope="session")
def trained_small():
    """A quickly trained 3-member ensemble on a 20-dimensional, 3-class blob problem."""
    from gradient_diversity import trainer

    ds = data_io.synthetic_blobs(20, 3, 80, 0.25, 4)
    cfg = trainer.TrainConfig(phase_schedule=[(8, "none")], hidden=(16,), batch_size=16,
                              learning_rate=0.2, seed=1)
    ens, _ = trainer.train_ensemble(cfg, ds.X, ds.y, 3)
    return ens, ds


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
