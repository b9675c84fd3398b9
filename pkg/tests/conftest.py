import sys

import numpy as np
import pytest

from segtool.volume import LabelSchema


@pytest.fixture
def schema():
    return LabelSchema.brats()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def one_hot_array(labels, num_classes):
    labels = np.asarray(labels)
    return (labels[None] == np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim)).astype(np.float64)


def random_probs(rng, num_classes, dims, lo=0.05):
    """Random per-voxel distributions with every entry at least ``lo``."""
    raw = rng.uniform(0.0, 1.0, (num_classes,) + tuple(dims))
    raw /= raw.sum(axis=0, keepdims=True)
    return lo + (1 - num_classes * lo) * raw


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(mod.format_line(n))
