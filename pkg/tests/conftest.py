import numpy as np
import pytest

from bestta.adapter import calibrate_source
from bestta.bench import Protocol
from bestta.models import pretrain


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        d = np.zeros_like(x)
        d[idx] = h
        g[idx] = (f(x + d) - f(x - d)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


@pytest.fixture(scope="session")
def fixture():
    return pretrain()


@pytest.fixture(scope="session")
def model(fixture):
    return fixture.model


@pytest.fixture(scope="session")
def protocol():
    return Protocol()


@pytest.fixture(scope="session")
def calibration(model, protocol):
    return calibrate_source(model, protocol.calibration_samples())


@pytest.fixture(scope="session")
def small_model():
    from bestta.models import init_model

    return init_model(np.random.default_rng(5), in_channels=2, widths=(3, 4, 4, 3), n_classes=3)


TINY = {"epochs": 1, "n_train": 200, "n_heldout": 50, "target_accuracy": 0.0}


@pytest.fixture(scope="session")
def tiny_fixture():
    return pretrain(**TINY)


@pytest.fixture(scope="session")
def tiny_stream():
    from bestta.simulator import continual_schedule, default_domains

    return continual_schedule(default_domains(), rounds=2, samples_per_domain=3, seed=1)
