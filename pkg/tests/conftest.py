import numpy as np
import pytest
from hypothesis import settings

from modflow.graph import AtomAlphabet, LabeledGraph

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

ABC = AtomAlphabet(("A", "B", "C"), (4, 4, 4))


def random_graph(rng, M, K=3, extra=2, dim=2, alphabet=None):
    """Connected random graph: a random tree plus a few extra bonds."""
    alphabet = alphabet or AtomAlphabet(tuple(f"L{k}" for k in range(K)), (4,) * K)
    edges = {}
    for a in range(1, M):
        edges[(int(rng.integers(a)), a)] = int(rng.integers(1, 4))
    for _ in range(extra):
        i, j = sorted(rng.choice(M, 2, replace=False)) if M > 1 else (0, 0)
        if i != j:
            edges.setdefault((int(i), int(j)), int(rng.integers(1, 4)))
    e = [(i, j, b) for (i, j), b in edges.items()]
    return LabeledGraph(alphabet, rng.integers(0, alphabet.size, M), e, M, rng.normal(size=(M, dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
