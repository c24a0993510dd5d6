import numpy as np
import pytest

from sonarmatch import synthgen


@pytest.fixture(scope="session")
def small_dataset():
    """24 frames, 4 classes, two objects per frame."""
    cfg = synthgen.SynthConfig(num_classes=4, num_images=24, objects_per_image=2, height=160,
                               width=200, object_size=40.0, seed=3)
    return synthgen.generate_dataset(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
