import numpy as np
import pytest

from dafos.graph import DatasetBundle, gen_planted_features, gen_sbm, random_splits

ACCEPTANCE_RESULTS: list[str] = []


def small_sbm_bundle(seed: int = 0, n: int = 300) -> DatasetBundle:
    graph, blocks = gen_sbm(n, 3, 0.08, 0.01, seed=seed)
    features, labels = gen_planted_features(graph, blocks, 8, 0.8, seed=seed + 1)
    return DatasetBundle(graph, features, labels, random_splits(n, seed=seed + 2))


@pytest.fixture(scope="session")
def tiny_dataset() -> DatasetBundle:
    return small_sbm_bundle()


def random_edges(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    return rng.integers(0, n, size=(m, 2))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
