import os

import numpy as np
import pytest

from credassign.data import Dataset, write_cifar_batch
from credassign.network import ConvLayer, DenseLayer, MaxPoolLayer, Network

ACCEPTANCE_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        ACCEPTANCE_RESULTS.append((number, status, title, item.name))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, name in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title} ({name})")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_pixels(n, seed=0):
    """Class-dependent colour blobs plus noise; learnable but not trivial."""
    r = np.random.default_rng(seed)
    labels = r.integers(0, 10, n)
    base = np.random.default_rng(99).integers(30, 226, (10, 3, 1, 1))
    px = np.clip(base[labels] + r.normal(0, 45, (n, 3, 32, 32)), 0, 255).astype(np.uint8)
    return px, labels


@pytest.fixture(scope="session")
def tiny_data():
    px, lab = synthetic_pixels(600, seed=1)
    return Dataset(px[:450], lab[:450], "train"), Dataset(px[450:], lab[450:], "val")


@pytest.fixture
def cifar_dir(tmp_path):
    """A miniature CIFAR-10 directory: five 20-record train files and a 30-record test file."""
    for i in range(1, 6):
        px, lab = synthetic_pixels(20, seed=i)
        write_cifar_batch(tmp_path / f"data_batch_{i}.bin", px, lab)
    px, lab = synthetic_pixels(30, seed=10)
    lab[:10] = 5  # guarantee some dogs
    write_cifar_batch(tmp_path / "test_batch.bin", px, lab)
    return tmp_path


def micro_net(dtype=np.float64, seed=0, input_size=12, channels=8):
    """Shrunken copy of the CIFAR net: 12x12 input, 8-channel convs."""
    layers = [
        ConvLayer("conv1", 3, channels, 5), MaxPoolLayer(2),
        ConvLayer("conv2", channels, channels, 3), MaxPoolLayer(2),
        DenseLayer("fc1", channels, 16), DenseLayer("fc2", 16, 12),
        DenseLayer("fc3", 12, 10, relu=False),
    ]
    net = Network(layers, (3, input_size, input_size), dtype)
    r = np.random.default_rng(seed)
    for l in net.weight_layers:
        l.W = (r.standard_normal(l.weight_shape) * np.sqrt(2.0 / l.fan_in)).astype(dtype)
        l.bias = (r.standard_normal(l.weight_shape[0]) * 0.1).astype(dtype)
    return net


def data_dir_or_none():
    d = os.environ.get("CREDASSIGN_DATA_DIR")
    return d if d and os.path.isdir(d) else None
