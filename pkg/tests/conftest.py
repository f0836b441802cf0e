import numpy as np
import pytest

from sitepool.data import MicroDataset, SummaryDataset
from sitepool.oracle import SyntheticTruth, simulate_hierarchical_data


def central_difference(f, x, h=1e-3):
    """Five-point central difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * h)
    return out


def relative_error(g, fd):
    g = np.asarray(g, dtype=float)
    fd = np.asarray(fd, dtype=float)
    return float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))))


@pytest.fixture
def toy_summary():
    return SummaryDataset(("1", "2", "3"), np.array([4.0, 10.0, 16.0]), np.full(3, 2.0))


@pytest.fixture
def joint_summary_data():
    return SummaryDataset(("a", "b", "c", "d"), np.array([1.0, 3.0, -2.0, 0.5]),
                          np.array([1.0, 1.5, 2.0, 0.7]), np.array([10.0, 12.0, 9.0, 11.0]),
                          np.array([0.8, 1.1, 0.9, 1.3]))


@pytest.fixture
def small_micro():
    V = np.array([[1.0, 0.3], [0.3, 0.5]])
    truth = SyntheticTruth(4, 40, mu=[2.0, 2.5], tau=[1.0, 3.0], V=V, sigma_y=1.5, seed=3)
    return simulate_hierarchical_data(truth).data


@pytest.fixture
def tiny_micro():
    sites = ("1", "2")
    site = np.array([0, 0, 0, 1, 1, 1])
    treat = np.array([0, 1, 1, 0, 0, 1])
    y = np.array([1.0, 2.0, 2.5, 0.0, 0.5, 3.0])
    return MicroDataset(sites, site, treat, y, {"x1": np.array([0, 1, 0, 1, 0, 1])})


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the verbosity."""
    lines = []
    for key, label in (("passed", "PASS"), ("failed", "FAIL"), ("skipped", "SKIP")):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", ()):
                if name == "criterion":
                    lines.append((value[0], f"criterion {value[0]:>2d} {label}: {value[1]}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
