"""Labeled graphs, alphabets and the score <-> label maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from hashlib import blake2b
from typing import Optional, Sequence

import numpy as np

BOND_ORDERS = (1, 2, 3)
ATOM = "atom"
TREE = "tree"


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class AtomAlphabet:
    labels: tuple
    valences: tuple = ()
    mode: str = ATOM

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise GraphError(f"duplicate labels in alphabet: {labels}")
        if len(labels) < 2:
            raise GraphError("alphabet needs at least two labels")
        vals = tuple(self.valences) if self.valences else (None,) * len(labels)
        if len(vals) != len(labels):
            raise GraphError("valences must align with labels")
        object.__setattr__(self, "valences", vals)
        if self.mode not in (ATOM, TREE):
            raise GraphError(f"unknown alphabet mode {self.mode!r}")
        if self.mode == ATOM and any(v is None for v in vals):
            raise GraphError("atom-mode labels need a valence")

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, symbol: str) -> int:
        try:
            return self.labels.index(symbol)
        except ValueError:
            raise GraphError(f"label {symbol!r} not in alphabet") from None

    def is_cluster(self, k: int) -> bool:
        return self.valences[k] is None

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "valences": list(self.valences), "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "AtomAlphabet":
        return cls(tuple(d["labels"]), tuple(d["valences"]), d["mode"])


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledGraph:
    """Fixed topology with per-node categorical labels.

    ``edges`` is an (E, 3) int array of ``(i, j, bond_order)`` rows with i < j.
    ``labels`` may be None for a bare topology (skeleton). ``meta`` carries
    optional provenance, e.g. cluster membership for tree-mode graphs.
    """

    alphabet: AtomAlphabet
    labels: Optional[np.ndarray]
    edges: np.ndarray
    num_nodes: int
    coords: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        M = int(self.num_nodes)
        object.__setattr__(self, "num_nodes", M)
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        if len(e):
            i, j = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
            e = np.stack([i, j, e[:, 2]], axis=1)
            e = e[np.lexsort((e[:, 1], e[:, 0]))]
            if np.any(i == j):
                raise GraphError("self-loop in edge list")
            if np.any(e[:, :2] < 0) or np.any(e[:, :2] >= M):
                raise GraphError("edge index out of range")
            if len({(a, b) for a, b, _ in e}) != len(e):
                raise GraphError("duplicate edge")
            if not np.all(np.isin(e[:, 2], BOND_ORDERS)):
                raise GraphError("bond orders must be in {1, 2, 3}")
        object.__setattr__(self, "edges", _frozen(e))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != M:
                raise GraphError("label count differs from node count")
            if np.any(lab < 0) or np.any(lab >= self.alphabet.size):
                raise GraphError("label index outside alphabet")
            object.__setattr__(self, "labels", _frozen(lab))
        if self.coords is not None:
            x = np.asarray(self.coords, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] != M or x.shape[1] not in (2, 3):
                raise GraphError("coords must be M x D with D in {2, 3}")
            object.__setattr__(self, "coords", _frozen(x))

    @property
    def K(self) -> int:
        return self.alphabet.size

    def symbols(self) -> list:
        return [self.alphabet.labels[k] for k in self.labels]

    def neighbors(self) -> list:
        nb = [[] for _ in range(self.num_nodes)]
        for i, j, b in self.edges:
            nb[i].append((int(j), int(b)))
            nb[j].append((int(i), int(b)))
        return nb

    def bond_sums(self) -> np.ndarray:
        s = np.zeros(self.num_nodes, dtype=np.int64)
        if len(self.edges):
            np.add.at(s, self.edges[:, 0], self.edges[:, 2])
            np.add.at(s, self.edges[:, 1], self.edges[:, 2])
        return s

    def with_labels(self, labels) -> "LabeledGraph":
        return LabeledGraph(self.alphabet, labels, self.edges, self.num_nodes, self.coords, self.meta)

    def with_coords(self, coords) -> "LabeledGraph":
        return LabeledGraph(self.alphabet, self.labels, self.edges, self.num_nodes, coords, self.meta)

    def topology(self) -> "LabeledGraph":
        return LabeledGraph(self.alphabet, None, self.edges, self.num_nodes, self.coords, self.meta)

    def permute(self, perm: Sequence[int]) -> "LabeledGraph":
        """Relabel nodes so that new node ``perm[k]`` is old node ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        labels = None
        if self.labels is not None:
            labels = np.empty_like(self.labels)
            labels[perm] = self.labels
        coords = None
        if self.coords is not None:
            coords = np.empty_like(self.coords)
            coords[perm] = self.coords
        e = self.edges.copy()
        if len(e):
            e[:, 0], e[:, 1] = perm[self.edges[:, 0]], perm[self.edges[:, 1]]
        return LabeledGraph(self.alphabet, labels, e, self.num_nodes, coords)

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return False
        nb = self.neighbors()
        seen, stack = {0}, [0]
        while stack:
            for j, _ in nb[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.num_nodes


def onehot_smooth(graph: LabeledGraph, eps: float) -> np.ndarray:
    if not 0.0 <= eps <= 1.0:
        raise GraphError(f"eps must lie in [0, 1], got {eps}")
    K = graph.K
    lab = graph.labels
    if lab is None or np.any(lab >= K) or np.any(lab < 0):
        raise GraphError("graph labels invalid for alphabet")
    z = np.full((graph.num_nodes, K), eps / K)
    z[np.arange(graph.num_nodes), lab] += 1.0 - eps
    return z


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise GraphError("softmax of non-finite scores")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. lowest-index tie-break
    return np.argmax(np.asarray(probs), axis=-1)


def log_graph_likelihood(graph: LabeledGraph, z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (graph.num_nodes, graph.K):
        raise GraphError(f"score shape {z.shape} != ({graph.num_nodes}, {graph.K})")
    lp = log_softmax_rows(z)
    return float(lp[np.arange(graph.num_nodes), graph.labels].sum())


def _h(s: str, size: int) -> str:
    return blake2b(s.encode(), digest_size=size).hexdigest()


def wl_hash(graph: LabeledGraph, digest_size: int = 32) -> str:
    """Weisfeiler-Lehman digest over node labels and bond orders.

    Runs M refinement rounds and hashes the sorted multiset of colours from
    every round, so the digest does not depend on node order.
    """
    M = graph.num_nodes
    if graph.labels is None:
        colors = ["*"] * M
    else:
        colors = [graph.alphabet.labels[k] for k in graph.labels]
    nb = graph.neighbors()
    history = [f"{M}|{len(graph.edges)}", ",".join(sorted(colors))]
    for _ in range(M):
        colors = [
            _h(colors[i] + "|" + ";".join(sorted(f"{b}:{colors[j]}" for j, b in nb[i])), 16)
            for i in range(M)
        ]
        history.append(",".join(sorted(colors)))
    return _h("/".join(history), digest_size)
