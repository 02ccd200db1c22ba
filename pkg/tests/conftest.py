import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sphere_cloud(n, radius=1.0, seed=0, center=(0.0, 0.0, 0.0)):
    """Quasi-uniform points on a sphere (Fibonacci lattice, rotated by seed)."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    p = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    return radius * p @ q.T + np.asarray(center)


def pytest_terminal_summary(terminalreporter):
    gate = sys.modules.get("test_acceptance")
    if gate is not None and gate.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(gate.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
