import numpy as np
import pytest
from hypothesis import strategies as st

from msg3d.graph_core import SkeletonTopology


def random_connected(rng: np.random.Generator, n: int, extra: float = 0.15) -> SkeletonTopology:
    """Random spanning tree plus a sprinkling of extra edges."""
    order = rng.permutation(n)
    edges = {tuple(sorted((int(order[i]), int(order[rng.integers(0, i)])))) for i in range(1, n)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra / max(n / 8, 1):
                edges.add((i, j))
    return SkeletonTopology(n, tuple(sorted(edges)), int(rng.integers(0, n)))


@st.composite
def connected_graphs(draw, max_nodes: int = 30):
    n = draw(st.integers(1, max_nodes))
    seed = draw(st.integers(0, 2**32 - 1))
    extra = draw(st.sampled_from([0.0, 0.1, 0.3, 0.8]))
    return random_connected(np.random.default_rng(seed), n, extra)


@pytest.fixture(scope="session")
def ntu():
    return SkeletonTopology.preset("ntu25")


@pytest.fixture(scope="session")
def kinetics():
    return SkeletonTopology.preset("kinetics18")


# -- acceptance reporting ---------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
