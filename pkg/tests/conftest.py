import numpy as np
import pytest

from fixq.store import FloatModel, WeightTensor


def random_model(seed, dims=((4, 3, 3, 3), (8, 4, 3, 3), (2, 8, 1, 1)), diverse=False):
    """Gaussian weights; ``diverse`` gives every output channel its own scale."""
    rng = np.random.default_rng(seed)
    tensors = []
    for d in dims:
        w = rng.normal(0.0, 0.1, size=d)
        if diverse:
            w *= 2.0 ** rng.uniform(-4, 0, size=(d[0], 1, 1, 1))
        tensors.append(WeightTensor(w.astype(np.float32).astype(np.float64)))
    return FloatModel(tensors)


REALISTIC_DIMS = ((64, 3, 5, 5), (64, 64, 3, 3), (128, 64, 3, 3), (3, 128, 5, 5))


def diverse_model(seed):
    """Conv-sized Gaussian layers whose output channels span three octaves of scale."""
    rng = np.random.default_rng(seed)
    tensors = []
    for d in REALISTIC_DIMS:
        w = rng.normal(0.0, 0.05, size=d) * 2.0 ** rng.uniform(-3, 0, size=(d[0], 1, 1, 1))
        tensors.append(WeightTensor(w))
    return FloatModel(tensors)


def table4_manifest():
    """17 layers with 5.18e6 parameters and 3200 output channels in total."""
    from fixq.store import ModelManifest

    dims = [(190, 1, 1, 1)] * 16 + [(160, 1, 1, (5_180_000 - 16 * 190) // 160)]
    return ModelManifest.from_dims(dims)


@pytest.fixture
def model():
    return random_model(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[k])
