import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robust_topo.mesh import build_ground_structure, build_truss

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def random_truss(rng, nx=None, ny=None):
    """Small fully connected ground structure with the left column fixed."""
    nx = nx or int(rng.integers(2, 4))
    ny = ny or int(rng.integers(2, 4))
    sx = float(rng.uniform(0.5, 2.0))
    sy = float(rng.uniform(0.5, 2.0))
    return build_ground_structure(nx, ny, sx, lambda i, j, x, y: i == 0, spacing_y=sy)


def random_design(rng, m, v=1.0):
    x = rng.uniform(0.1, 1.0, m)
    return x * v / x.sum()


def random_load(rng, model, nodes=1):
    f = np.zeros(model.n)
    free_nodes = np.nonzero(np.all(model.dof_map >= 0, axis=1))[0]
    for nid in rng.choice(free_nodes, size=min(nodes, len(free_nodes)), replace=False):
        f[model.dof_map[nid]] = rng.standard_normal(2)
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_truss():
    """Free node (1, 0) tied to three supports at (0, -1), (0, 0), (0, 1)."""
    coords = [(0.0, -1.0), (0.0, 0.0), (0.0, 1.0), (1.0, 0.0)]
    fixed = [(True, True)] * 3 + [(False, False)]
    return build_truss(coords, [(0, 3), (1, 3), (2, 3)], fixed)
