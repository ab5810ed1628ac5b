"""Ring perception, ring vocabularies and junction-tree style contraction."""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .graph import TREE, AtomAlphabet, GraphError, LabeledGraph

BOND_CHAR = {1: "-", 2: "=", 3: "#"}
CLUSTER_PREFIX = "ring:"


class RingNotInVocabulary(GraphError):
    pass


class ExpansionError(GraphError):
    pass


def _bfs_tree(nb, root):
    parent = {root: None}
    q = deque([root])
    while q:
        u = q.popleft()
        for v in sorted(nb[u]):
            if v not in parent:
                parent[v] = u
                q.append(v)
    return parent


def _path_to_root(parent, v):
    out = [v]
    while parent[out[-1]] is not None:
        out.append(parent[out[-1]])
    return out


def find_rings(graph: LabeledGraph) -> list:
    """Minimum cycle basis (Horton candidates + GF(2) elimination).

    Returns rings as vertex lists in cycle order; for molecules this is the
    usual smallest set of smallest rings.
    """
    M = graph.num_nodes
    nb = [set() for _ in range(M)]
    eid = {}
    for k, (i, j, _) in enumerate(graph.edges):
        nb[i].add(int(j))
        nb[j].add(int(i))
        eid[(int(i), int(j))] = k
    # cycle-space dimension: E - V + C
    comps, seen = 0, set()
    for s in range(M):
        if s not in seen:
            comps += 1
            seen |= set(_bfs_tree(nb, s))
    rank_needed = len(graph.edges) - M + comps
    if rank_needed <= 0:
        return []

    def key(a, b):
        return eid[(a, b) if a < b else (b, a)]

    cands = {}
    for v in range(M):
        parent = _bfs_tree(nb, v)
        for x, y, _ in graph.edges:
            x, y = int(x), int(y)
            if x not in parent or parent.get(x) == y or parent.get(y) == x:
                continue
            px, py = _path_to_root(parent, x), _path_to_root(parent, y)
            if len(set(px) & set(py)) != 1:
                continue
            cyc = px[::-1] + py[:-1]
            mask = 0
            for a, b in zip(cyc, cyc[1:] + cyc[:1]):
                mask |= 1 << key(a, b)
            if mask not in cands:
                cands[mask] = cyc
    order = sorted(cands.items(), key=lambda kv: (len(kv[1]), sorted(kv[1])))
    basis, rings = [], []
    for mask, cyc in order:
        reduced = mask
        for b in basis:
            reduced = min(reduced, reduced ^ b)
        if reduced:
            basis.append(reduced)
            basis.sort(reverse=True)
            rings.append(cyc)
            if len(rings) == rank_needed:
                break
    return rings


def _bond_lookup(graph):
    return {(int(min(i, j)), int(max(i, j))): int(b) for i, j, b in graph.edges}


def _ring_bonds(cyc, bonds):
    return [bonds[(min(a, b), max(a, b))] for a, b in zip(cyc, cyc[1:] + cyc[:1])]


def _descriptor(symbols, bond_seq):
    return "".join(s + BOND_CHAR[b] for s, b in zip(symbols, bond_seq))


def _orientations(n):
    """All rotations and reflections of a cycle of length n, as index lists."""
    base = list(range(n))
    out = []
    for r in range(n):
        rot = base[r:] + base[:r]
        out.append(rot)
        out.append([rot[0]] + rot[1:][::-1])
    return out


def canonical_ring(graph: LabeledGraph, cyc: list):
    """Return (descriptor, members in canonical order, symbols, bonds)."""
    bonds = _bond_lookup(graph)
    syms = graph.symbols()
    best = None
    for o in _orientations(len(cyc)):
        members = [cyc[k] for k in o]
        s = [syms[a] for a in members]
        b = _ring_bonds(members, bonds)
        d = _descriptor(s, b)
        if best is None or d < best[0]:
            best = (d, members, tuple(s), tuple(b))
    return best


@dataclass(frozen=True)
class RingPattern:
    descriptor: str
    symbols: tuple
    bonds: tuple
    count: int

    @property
    def name(self) -> str:
        return CLUSTER_PREFIX + self.descriptor


@dataclass
class ClusterVocabulary:
    patterns: list = field(default_factory=list)

    def __len__(self):
        return len(self.patterns)

    def index(self, descriptor: str) -> int:
        for k, p in enumerate(self.patterns):
            if p.descriptor == descriptor:
                return k
        raise RingNotInVocabulary(f"ring {descriptor!r} not in vocabulary")

    def __contains__(self, descriptor):
        return any(p.descriptor == descriptor for p in self.patterns)

    def tree_alphabet(self, atoms: AtomAlphabet) -> AtomAlphabet:
        labels = tuple(atoms.labels) + tuple(p.name for p in self.patterns)
        vals = tuple(atoms.valences) + (None,) * len(self.patterns)
        return AtomAlphabet(labels, vals, TREE)

    def to_dict(self):
        return [
            {"descriptor": p.descriptor, "symbols": list(p.symbols), "bonds": list(p.bonds), "count": p.count}
            for p in self.patterns
        ]

    @classmethod
    def from_dict(cls, rows):
        return cls([RingPattern(r["descriptor"], tuple(r["symbols"]), tuple(r["bonds"]), int(r["count"])) for r in rows])


def extract_ring_vocabulary(corpus, cap: int = 30) -> ClusterVocabulary:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    counts, info = Counter(), {}
    for g in corpus:
        for cyc in find_rings(g):
            d, _, s, b = canonical_ring(g, cyc)
            counts[d] += 1
            info[d] = (s, b)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return ClusterVocabulary([RingPattern(d, info[d][0], info[d][1], c) for d, c in top])


def tree_decompose(graph: LabeledGraph, vocab: ClusterVocabulary) -> LabeledGraph:
    """Contract every ring into one cluster node.

    Cluster nodes sit at the centroid of their atoms; tree edges touching a
    cluster get bond order 1, atom-atom edges keep their order. ``meta``
    records the atom-level skeleton so the tree can be expanded again.
    """
    rings = find_rings(graph)
    tree_alpha = vocab.tree_alphabet(graph.alphabet)
    ring_info = []
    for cyc in rings:
        d, members, _, _ = canonical_ring(graph, cyc)
        ring_info.append((vocab.index(d), members))
    in_ring = set(a for _, m in ring_info for a in m)
    units = [("ring", k, m) for k, (_, m) in enumerate(ring_info)]
    units += [("atom", a, [a]) for a in range(graph.num_nodes) if a not in in_ring]
    units.sort(key=lambda u: (min(u[2]), u[0] != "atom", sorted(u[2])))
    owner = {}
    for n, u in enumerate(units):
        for a in u[2]:
            owner.setdefault(a, n)

    cand = {}
    ring_bond = set()
    for _, m in ring_info:
        for a, b in zip(m, m[1:] + m[:1]):
            ring_bond.add((min(a, b), max(a, b)))
    for i, j, b in graph.edges:
        i, j, b = int(i), int(j), int(b)
        if (i, j) in ring_bond:
            continue
        u, v = owner[i], owner[j]
        if u == v:
            continue
        order = b if units[u][0] == "atom" and units[v][0] == "atom" else 1
        cand.setdefault((min(u, v), max(u, v)), (1, order))
    ring_nodes = [n for n, u in enumerate(units) if u[0] == "ring"]
    for x in ring_nodes:
        for y in ring_nodes:
            if x < y:
                shared = len(set(units[x][2]) & set(units[y][2]))
                if shared:
                    cand[(x, y)] = (shared, 1)
    # maximum spanning forest keeps the contracted graph acyclic
    parent = list(range(len(units)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = []
    for (u, v), (w, order) in sorted(cand.items(), key=lambda kv: (-kv[1][0], kv[0])):
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            edges.append((u, v, order))

    labels = []
    for u in units:
        if u[0] == "ring":
            labels.append(graph.alphabet.size + ring_info[u[1]][0])
        else:
            labels.append(int(graph.labels[u[1]]))
    coords = None
    if graph.coords is not None:
        coords = np.array([graph.coords[u[2]].mean(axis=0) for u in units])
    meta = {
        "members": [list(u[2]) for u in units],
        "atom_alphabet": graph.alphabet,
        "atom_edges": graph.edges,
        "atom_num_nodes": graph.num_nodes,
        "atom_coords": graph.coords,
    }
    return LabeledGraph(tree_alpha, labels, edges, len(units), coords, meta)


def expand_tree(tree: LabeledGraph, vocab: ClusterVocabulary) -> LabeledGraph:
    """Substitute vocabulary rings back onto the stored atom skeleton.

    A cluster label is mapped onto the member atoms in stored order, or onto
    the first rotation/reflection whose bond pattern matches the skeleton.
    Raises ExpansionError when a label cannot be placed (atom label on a
    ring node, cluster label on a single atom, or ring size mismatch).
    """
    if tree.alphabet.mode != TREE or "members" not in tree.meta:
        return tree
    atoms = tree.meta["atom_alphabet"]
    skel = LabeledGraph(atoms, None, tree.meta["atom_edges"], tree.meta["atom_num_nodes"])
    bonds = _bond_lookup(skel)
    n_atom = atoms.size
    labels = [None] * skel.num_nodes
    for node, members in enumerate(tree.meta["members"]):
        k = int(tree.labels[node])
        is_cluster = k >= n_atom
        if len(members) == 1:
            if is_cluster:
                raise ExpansionError(f"cluster label on single-atom node {node}")
            labels[members[0]] = k
            continue
        if not is_cluster:
            raise ExpansionError(f"atom label on ring node {node}")
        pat = vocab.patterns[k - n_atom]
        if len(pat.symbols) != len(members):
            raise ExpansionError(f"ring size mismatch at node {node}")
        skel_bonds = tuple(_ring_bonds(members, bonds))
        placement = list(range(len(members)))
        if tuple(pat.bonds) != skel_bonds:
            for o in _orientations(len(members)):
                if tuple(_ring_bonds([members[i] for i in o], bonds)) == tuple(pat.bonds):
                    placement = o
                    break
        for pos, idx in enumerate(placement):
            a = members[idx]
            if labels[a] is None:
                labels[a] = atoms.index(pat.symbols[pos])
    if any(l is None for l in labels):
        raise ExpansionError("unassigned atom after expansion")
    return LabeledGraph(atoms, labels, skel.edges, skel.num_nodes, tree.meta.get("atom_coords"))
