"""Generate a seeded QM9-style corpus of small kekulized C/N/O/F molecules.

No public chemistry dataset is reachable from the build sandbox, so the
desk experiments run on this stand-in: 4-9 heavy atoms, QM9-like element
mix, rings of size 3-6, no aromatic notation.

    python3 scripts/make_desk_corpus.py --out data --train 2000 --heldout 100
"""
import argparse
import os

import numpy as np

from modflow.chem import QM9_ALPHABET, check_valency, parse_smiles, write_smiles
from modflow.graph import LabeledGraph, wl_hash

SYMBOLS = ("C", "N", "O", "F")
VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1}
ELEMENT_P = (0.70, 0.12, 0.16, 0.02)
SIZE_P = {4: 0.03, 5: 0.05, 6: 0.09, 7: 0.16, 8: 0.27, 9: 0.40}
FORBIDDEN = {frozenset(p) for p in [("O", "O"), ("O", "F"), ("N", "F"), ("F", "F"), ("N", "O")]}


def _bfs_dist(adj, s):
    dist = {s: 0}
    frontier = [s]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def random_molecule(rng):
    n = int(rng.choice(list(SIZE_P), p=list(SIZE_P.values())))
    syms = list(rng.choice(SYMBOLS, size=n, p=ELEMENT_P))
    syms[0] = "C"
    bonds = {}
    adj = [set() for _ in range(n)]

    def free(a):
        return VALENCE[syms[a]] - sum(b for (i, j), b in bonds.items() if a in (i, j))

    for a in range(1, n):
        hosts = [h for h in range(a) if free(h) >= 1 and frozenset((syms[h], syms[a])) not in FORBIDDEN]
        if not hosts:
            return None
        h = int(rng.choice(hosts))
        bonds[(h, a)] = 1
        adj[h].add(a)
        adj[a].add(h)
    # ring closures
    for _ in range(int(rng.choice([0, 1, 2], p=[0.35, 0.45, 0.20]))):
        pairs = []
        for i in range(n):
            d = _bfs_dist(adj, i)
            for j in range(i + 1, n):
                if 2 <= d.get(j, 0) <= 5 and free(i) >= 1 and free(j) >= 1 \
                        and frozenset((syms[i], syms[j])) not in FORBIDDEN:
                    pairs.append((i, j))
        if not pairs:
            break
        i, j = pairs[int(rng.integers(len(pairs)))]
        bonds[(i, j)] = 1
        adj[i].add(j)
        adj[j].add(i)
    # bond upgrades
    for key in list(bonds):
        if rng.random() < 0.22:
            i, j = key
            if free(i) >= 1 and free(j) >= 1:
                bonds[key] += 1
                if rng.random() < 0.15 and free(i) >= 1 and free(j) >= 1:
                    bonds[key] += 1
    edges = [(i, j, b) for (i, j), b in bonds.items()]
    g = LabeledGraph(QM9_ALPHABET, [QM9_ALPHABET.index(s) for s in syms], edges, n)
    return g if plausible(g) else None


def plausible(g):
    if not check_valency(g)[1]:
        return False
    from modflow.rings import find_rings
    in_ring = {a for r in find_rings(g) for a in r}
    doubles = np.zeros(g.num_nodes, dtype=int)
    for i, j, b in g.edges:
        if b == 3 and (i in in_ring or j in in_ring):
            return False
        if b >= 2:
            doubles[i] += 1
            doubles[j] += 1
    # no cumulated double bonds
    return bool(np.all(doubles <= 1))


def build(n_total, seed):
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    while len(out) < n_total:
        g = random_molecule(rng)
        if g is None:
            continue
        h = wl_hash(g)
        if h in seen:
            continue
        seen.add(h)
        smi = write_smiles(g)
        assert wl_hash(parse_smiles(smi)) == h
        out.append(smi)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--heldout", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    smiles = build(a.train + a.heldout, a.seed)
    os.makedirs(a.out, exist_ok=True)
    for name, rows in [("qm9_desk_train.smi", smiles[:a.train]), ("qm9_desk_heldout.smi", smiles[a.train:])]:
        with open(os.path.join(a.out, name), "w") as fh:
            fh.write("# seeded QM9-style stand-in corpus, kekulized, hydrogens implicit\n")
            fh.write("\n".join(rows) + "\n")
    print(f"wrote {len(smiles)} molecules to {a.out}")


if __name__ == "__main__":
    main()
