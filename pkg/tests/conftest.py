import numpy as np
import pytest

from dcama.episodes import ToyDatasetConfig, generate_toy_dataset, make_folds, sample_episode
from dcama.kernels import BACKENDS, get_backend
from dcama.pipeline import ModelConfig, ModelWeights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return get_backend(request.param)


@pytest.fixture(scope="session")
def small_dataset():
    """4 classes x 6 images at 32x32: fast enough for per-test forward passes."""
    return generate_toy_dataset(ToyDatasetConfig(num_classes=4, images_per_class=6, size=32), seed=3)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(input_size=(32, 32))


@pytest.fixture(scope="session")
def small_weights(small_config):
    return ModelWeights.init(small_config, seed=5)


@pytest.fixture
def small_episode(small_dataset):
    def make(n=1, seed=0):
        split = make_folds(small_dataset.classes, 2)[0]
        return sample_episode(small_dataset, split, n, np.random.default_rng(seed))

    return make


@pytest.fixture(scope="session")
def toy_dataset():
    """Default-size toy dataset (10 classes x 8 images, 96x96)."""
    return generate_toy_dataset(ToyDatasetConfig(), seed=0)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict; the summary lines are printed at the end of the run."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
