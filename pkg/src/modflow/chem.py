"""Kekulized SMILES subset, corpus files, valence checks and a 2D layout."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import AtomAlphabet, GraphError, LabeledGraph

VALENCES = {
    "C": (4,), "N": (3,), "O": (2,), "F": (1,), "H": (1,),
    "P": (3, 5), "S": (2, 4, 6), "Cl": (1,), "Br": (1,), "I": (1,), "B": (3,),
}
ORGANIC = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")

QM9_ALPHABET = AtomAlphabet(("C", "N", "O", "F"), (4, 3, 2, 1))
ZINC_ALPHABET = AtomAlphabet(
    ("C", "N", "O", "F", "P", "S", "Cl", "Br", "I"), (4, 3, 2, 1, 5, 6, 1, 1, 1)
)


class SmilesError(GraphError):
    pass


class UnknownAtomSymbol(SmilesError):
    pass


class AromaticInputRejected(SmilesError):
    pass


class UnbalancedParentheses(SmilesError):
    pass


class DanglingRingBond(SmilesError):
    pass


class EmptyInput(SmilesError):
    pass


class DisconnectedGraph(SmilesError):
    pass


@dataclass(frozen=True)
class SmilesToken:
    kind: str  # atom | bond | branch-open | branch-close | ring-bond-digit
    payload: object
    pos: int


_TOKEN = re.compile(r"Cl|Br|[BCNOPSFI]|[bcnops]|%\d\d|\d|[-=#:]|\(|\)|.", re.S)
_BOND = {"-": 1, "=": 2, "#": 3}


def tokenize(text: str) -> list:
    out = []
    for m in _TOKEN.finditer(text):
        t, pos = m.group(), m.start()
        if t in ORGANIC:
            out.append(SmilesToken("atom", t, pos))
        elif t in "bcnops":
            raise AromaticInputRejected(f"aromatic atom {t!r} at {pos}; input must be kekulized")
        elif t == ":":
            raise AromaticInputRejected(f"aromatic bond at {pos}; input must be kekulized")
        elif t in _BOND:
            out.append(SmilesToken("bond", _BOND[t], pos))
        elif t == "(":
            out.append(SmilesToken("branch-open", t, pos))
        elif t == ")":
            out.append(SmilesToken("branch-close", t, pos))
        elif t.startswith("%") or t.isdigit():
            out.append(SmilesToken("ring-bond-digit", int(t.lstrip("%")), pos))
        elif t == "[":
            raise UnknownAtomSymbol(f"bracket atoms are not supported (position {pos})")
        elif t in "/\\@":
            raise SmilesError(f"stereo notation {t!r} at {pos} is not supported")
        elif t == ".":
            raise SmilesError(f"disconnected input ('.') at {pos} is not supported")
        elif t.isspace():
            raise SmilesError(f"whitespace inside SMILES at {pos}")
        else:
            raise UnknownAtomSymbol(f"unknown symbol {t!r} at {pos}")
    return out


def parse_smiles(text: str, alphabet: AtomAlphabet = QM9_ALPHABET) -> LabeledGraph:
    text = text.strip()
    if not text:
        raise EmptyInput("empty SMILES")
    labels, edges = [], {}
    stack, prev, bond = [], None, None
    rings = {}
    for tok in tokenize(text):
        if tok.kind == "atom":
            if tok.payload not in alphabet.labels:
                raise UnknownAtomSymbol(f"atom {tok.payload!r} not in alphabet {alphabet.labels}")
            labels.append(alphabet.index(tok.payload))
            cur = len(labels) - 1
            if prev is not None:
                edges[(prev, cur)] = bond or 1
            prev, bond = cur, None
        elif tok.kind == "bond":
            if prev is None or bond is not None:
                raise SmilesError(f"misplaced bond at {tok.pos}")
            bond = tok.payload
        elif tok.kind == "branch-open":
            if prev is None:
                raise UnbalancedParentheses(f"branch before any atom at {tok.pos}")
            stack.append(prev)
        elif tok.kind == "branch-close":
            if not stack:
                raise UnbalancedParentheses(f"unmatched ')' at {tok.pos}")
            prev, bond = stack.pop(), None
        else:
            d = tok.payload
            if prev is None:
                raise DanglingRingBond(f"ring digit before any atom at {tok.pos}")
            if d in rings:
                other, obond = rings.pop(d)
                if bond is not None and obond is not None and bond != obond:
                    raise SmilesError(f"conflicting ring bond orders for digit {d}")
                if other == prev or (min(other, prev), max(other, prev)) in edges:
                    raise SmilesError(f"ring closure {d} duplicates a bond")
                edges[(other, prev)] = bond or obond or 1
            else:
                rings[d] = (prev, bond)
            bond = None
    if stack:
        raise UnbalancedParentheses("unclosed '('")
    if rings:
        raise DanglingRingBond(f"unclosed ring bond(s) {sorted(rings)}")
    if bond is not None:
        raise SmilesError("trailing bond symbol")
    e = [(a, b, o) for (a, b), o in edges.items()]
    return LabeledGraph(alphabet, labels, e, len(labels))


def _wl_ranks(graph: LabeledGraph) -> list:
    from hashlib import blake2b

    colors = graph.symbols()
    nb = graph.neighbors()
    for _ in range(graph.num_nodes):
        colors = [
            blake2b((colors[i] + "|" + ";".join(sorted(f"{b}:{colors[j]}" for j, b in nb[i]))).encode(),
                    digest_size=8).hexdigest()
            for i in range(graph.num_nodes)
        ]
    return colors


def write_smiles(graph: LabeledGraph) -> str:
    if graph.alphabet.mode != "atom":
        raise SmilesError("write_smiles needs an atom-mode graph")
    if not graph.is_connected():
        raise DisconnectedGraph("graph has more than one component")
    M = graph.num_nodes
    rank = _wl_ranks(graph)
    nb = graph.neighbors()
    order = lambda i: (rank[i], i)
    for i in range(M):
        nb[i].sort(key=lambda jb: order(jb[0]))
    root = min(range(M), key=order)

    # spanning tree by DFS, remaining edges become ring closures
    parent, children, visited = {root: None}, {i: [] for i in range(M)}, []
    seen = {root}
    closures = {i: [] for i in range(M)}
    stack = [(root, iter(nb[root]))]
    visited.append(root)
    tree_edges = set()
    while stack:
        u, it = stack[-1]
        for v, b in it:
            if v not in seen:
                seen.add(v)
                parent[v] = u
                children[u].append((v, b))
                tree_edges.add((min(u, v), max(u, v)))
                visited.append(v)
                stack.append((v, iter(nb[v])))
                break
        else:
            stack.pop()
    pos = {v: k for k, v in enumerate(visited)}
    for i, j, b in graph.edges:
        i, j, b = int(i), int(j), int(b)
        if (i, j) not in tree_edges:
            first, second = (i, j) if pos[i] < pos[j] else (j, i)
            closures[first].append(("open", second, b))
            closures[second].append(("close", first, b))

    bond_sym = {1: "", 2: "=", 3: "#"}
    digits, free = {}, []
    next_digit = [1]

    def alloc():
        if free:
            free.sort()
            return free.pop(0)
        d = next_digit[0]
        next_digit[0] += 1
        return d

    def fmt(d):
        return str(d) if d < 10 else f"%{d:02d}"

    out = []

    def emit(u):
        out.append(graph.alphabet.labels[graph.labels[u]])
        for kind, other, b in sorted(closures[u], key=lambda c: (c[0] != "close", pos[c[1]])):
            key = (min(u, other), max(u, other))
            if kind == "close":
                d = digits.pop(key)
                out.append(fmt(d))
                free.append(d)
            else:
                d = alloc()
                digits[key] = d
                out.append(bond_sym[b] + fmt(d))
        kids = children[u]
        for k, (v, b) in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append("(")
            out.append(bond_sym[b])
            emit(v)
            if not last:
                out.append(")")

    import sys

    limit = sys.getrecursionlimit()
    if M + 100 > limit:
        sys.setrecursionlimit(M + 100)
    emit(root)
    return "".join(out)


@dataclass
class Corpus:
    graphs: list = field(default_factory=list)
    errors: list = field(default_factory=list)  # (line number, message)
    sources: list = field(default_factory=list)  # original record text per graph

    def __len__(self):
        return len(self.graphs)


def read_smiles_lines(path, alphabet: AtomAlphabet = QM9_ALPHABET) -> Corpus:
    out = Corpus()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            s = s.split()[0]
            try:
                out.graphs.append(parse_smiles(s, alphabet))
                out.sources.append(s)
            except SmilesError as exc:
                out.errors.append((n, f"{type(exc).__name__}: {exc}"))
    return out


def read_xyz_blocks(path, alphabet: AtomAlphabet = QM9_ALPHABET) -> Corpus:
    """Blocks of: header ``M D``; M lines ``symbol x [y [z]]``; bond lines ``i j order``."""
    out = Corpus()
    with open(path, encoding="utf-8") as fh:
        lines = [(n, l.split("#", 1)[0].split()) for n, l in enumerate(fh, 1)]
    lines = [(n, f) for n, f in lines if f]
    k = 0
    while k < len(lines):
        n0, head = lines[k]
        try:
            if len(head) != 2:
                raise GraphError(f"expected header 'M D', got {' '.join(head)!r}")
            M, D = int(head[0]), int(head[1])
            if D not in (2, 3) or M < 1:
                raise GraphError(f"bad header M={M} D={D}")
            atoms = lines[k + 1:k + 1 + M]
            if len(atoms) < M:
                raise GraphError("truncated atom list")
            labels, coords = [], []
            for n, f in atoms:
                if f[0] not in alphabet.labels:
                    raise UnknownAtomSymbol(f"line {n}: atom {f[0]!r} not in alphabet")
                xyz = [float(v) for v in f[1:]]
                if len(xyz) != D:
                    raise GraphError(f"line {n}: expected {D} coordinates")
                labels.append(alphabet.index(f[0]))
                coords.append(xyz)
            k += 1 + M
            bonds = []
            while k < len(lines) and len(lines[k][1]) == 3:
                i, j, b = (int(v) for v in lines[k][1])
                bonds.append((i, j, b))
                k += 1
            out.graphs.append(LabeledGraph(alphabet, labels, bonds, M, np.array(coords)))
            out.sources.append(f"block@{n0}")
        except (GraphError, ValueError) as exc:
            out.errors.append((n0, f"{type(exc).__name__}: {exc}"))
            k += 1
            while k < len(lines) and len(lines[k][1]) != 2:
                k += 1
    return out


def read_corpus(path, fmt: str = "smiles-lines", alphabet: AtomAlphabet = QM9_ALPHABET) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    if fmt == "smiles-lines":
        return read_smiles_lines(path, alphabet)
    if fmt == "xyz-block":
        return read_xyz_blocks(path, alphabet)
    raise ValueError(f"unknown corpus format {fmt!r}")


def write_xyz_block(graph: LabeledGraph) -> str:
    x = graph.coords
    rows = [f"{graph.num_nodes} {x.shape[1]}"]
    for k in range(graph.num_nodes):
        rows.append(" ".join([graph.alphabet.labels[graph.labels[k]]] + [repr(float(v)) for v in x[k]]))
    rows += [f"{i} {j} {b}" for i, j, b in graph.edges]
    return "\n".join(rows) + "\n"


def max_valence(symbol: str, table=VALENCES) -> int:
    try:
        return max(table[symbol])
    except KeyError:
        raise GraphError(f"symbol {symbol!r} missing from valence table") from None


def check_valency(graph: LabeledGraph, table=VALENCES):
    """Per-node validity (bond-order sum <= max valence) and the overall flag."""
    if graph.alphabet.mode != "atom":
        raise GraphError("check_valency needs an atom-mode graph")
    caps = np.array([max_valence(s, table) for s in graph.symbols()], dtype=np.int64)
    ok = graph.bond_sums() <= caps
    return ok, bool(ok.all())


def implicit_hydrogens(graph: LabeledGraph, table=VALENCES) -> np.ndarray:
    """Valence slack per node; the smallest allowed valence that fits is used."""
    sums = graph.bond_sums()
    out = np.zeros(graph.num_nodes, dtype=np.int64)
    for k, s in enumerate(graph.symbols()):
        allowed = sorted(table[s])
        fit = [v for v in allowed if v >= sums[k]]
        out[k] = (fit[0] - sums[k]) if fit else 0
    return out


def graph_distances(graph: LabeledGraph) -> np.ndarray:
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path

    M = graph.num_nodes
    e = graph.edges
    A = csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(M, M)) if len(e) else csr_matrix((M, M))
    return shortest_path(A, directed=False, unweighted=True)


def layout_2d(graph: LabeledGraph, iterations: int = 300, seed: int = 0) -> np.ndarray:
    """Stress-majorization layout with unit bond length, centred at the origin."""
    M = graph.num_nodes
    if M == 1:
        return np.zeros((1, 2))
    d = graph_distances(graph)
    finite = np.isfinite(d)
    d[~finite] = (d[finite].max() if finite.any() else 1.0) + 2.0
    w = np.zeros_like(d)
    off = ~np.eye(M, dtype=bool)
    w[off] = d[off] ** -2.0
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * np.arange(M) / M
    x = np.stack([np.cos(ang), np.sin(ang)], axis=1) * max(1.0, M / (2 * np.pi))
    x += 1e-3 * rng.standard_normal(x.shape)
    V = -w.copy()
    V[np.diag_indices(M)] = w.sum(axis=1)
    Vp = np.linalg.pinv(V)
    for _ in range(iterations):
        diff = x[:, None, :] - x[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            B = np.where(off & (dist > 1e-12), -w * d / dist, 0.0)
        B[np.diag_indices(M)] = -B.sum(axis=1)
        x = Vp @ (B @ x)
    return x - x.mean(axis=0)


def ensure_coords(graph: LabeledGraph) -> LabeledGraph:
    if graph.coords is not None:
        return graph
    return graph.with_coords(layout_2d(graph))
