import numpy as np
import pytest

from modflow.chem import QM9_ALPHABET, ZINC_ALPHABET, parse_smiles
from modflow.graph import wl_hash
from modflow.rings import (ClusterVocabulary, ExpansionError, RingNotInVocabulary, expand_tree,
                           extract_ring_vocabulary, find_rings, tree_decompose)


def ring_of(n, sym="C"):
    return sym + "1" + sym * (n - 1) + "1"


def test_find_rings_counts():
    assert find_rings(parse_smiles("CCO")) == []
    assert len(find_rings(parse_smiles("C1CCCCC1"))) == 1
    rings = find_rings(parse_smiles("C1CCC2CCCCC2C1"))  # decalin
    assert sorted(len(r) for r in rings) == [6, 6]
    cubane = find_rings(parse_smiles("C12C3C4C1C5C2C3C45"))
    assert sorted(len(r) for r in cubane) == [4] * 5


def test_vocabulary_basic():
    assert len(extract_ring_vocabulary([parse_smiles("CCO"), parse_smiles("CC")])) == 0
    v = extract_ring_vocabulary([parse_smiles("C1=CC=CC=C1C")] * 10)
    assert len(v) == 1 and v.patterns[0].count == 10
    # the same ring written from a different atom hashes to the same entry
    v2 = extract_ring_vocabulary([parse_smiles("C1=CC=CC=C1"), parse_smiles("C=1C=CC=CC1")])
    assert len(v2) == 1 and v2.patterns[0].count == 2
    with pytest.raises(ValueError):
        extract_ring_vocabulary([], cap=0)


def test_vocabulary_cap_keeps_most_frequent():
    import itertools
    rng = np.random.default_rng(3)
    uniq = {}
    for n in (3, 4, 5):
        for atoms in itertools.product("CNO", repeat=n):
            s = atoms[0] + "1" + "".join(atoms[1:]) + "1"
            d = extract_ring_vocabulary([parse_smiles(s)]).patterns[0].descriptor
            uniq.setdefault(d, s)
            if len(uniq) == 40:
                break
        if len(uniq) == 40:
            break
    descs = sorted(uniq)
    assert len(descs) == 40
    freq = {d: int(f) for d, f in zip(descs, rng.permutation(40) + 1)}
    corpus = [parse_smiles(uniq[d]) for d in descs for _ in range(freq[d])]
    v = extract_ring_vocabulary(corpus, cap=30)
    # brute-force count: sort by frequency, then descriptor
    brute = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:30]
    assert [(p.descriptor, p.count) for p in v.patterns] == brute


def test_tree_decompose_examples():
    acyclic = parse_smiles("CC(O)N")
    vocab = extract_ring_vocabulary([acyclic])
    t = tree_decompose(acyclic, vocab)
    assert t.num_nodes == 4 and np.array_equal(t.edges, acyclic.edges)
    assert list(t.labels) == list(acyclic.labels)

    tol = parse_smiles("C1=CC=CC=C1C")
    v = extract_ring_vocabulary([tol])
    t = tree_decompose(tol, v)
    assert t.num_nodes == 2 and len(t.edges) == 1 and t.edges[0, 2] == 1
    assert t.alphabet.is_cluster(int(t.labels[0])) != t.alphabet.is_cluster(int(t.labels[1]))

    naph = parse_smiles("C1=CC=C2C=CC=CC2=C1")
    v = extract_ring_vocabulary([naph])
    t = tree_decompose(naph, v)
    assert t.num_nodes == 2 and len(t.edges) == 1
    assert all(t.alphabet.is_cluster(int(k)) for k in t.labels)


def test_tree_centroid_coords():
    from modflow.chem import ensure_coords
    g = ensure_coords(parse_smiles("C1CCCCC1O"))
    t = tree_decompose(g, extract_ring_vocabulary([g]))
    ring_node = [k for k in range(t.num_nodes) if len(t.meta["members"][k]) > 1][0]
    assert np.allclose(t.coords[ring_node], g.coords[t.meta["members"][ring_node]].mean(axis=0))


def test_ring_not_in_vocabulary():
    v = extract_ring_vocabulary([parse_smiles("C1CC1")])
    with pytest.raises(RingNotInVocabulary):
        tree_decompose(parse_smiles("C1CCC1"), v)


CORPUS = ["C1=CC=CC=C1C", "C1=CC=C2C=CC=CC2=C1", "C1CC1C(=O)N", "OC1CCNCC1", "C1CC2CC1CO2",
          "C12C3C4C1C5C2C3C45", "N1C(C)(C=NC)C1(O)O", "C=1OC(OCCCO)C1", "CC#N", "C1=COC=C1CC1CC1"]


def test_tree_round_trip_wl_equal():
    graphs = [parse_smiles(s) for s in CORPUS]
    v = extract_ring_vocabulary(graphs)
    for g in graphs:
        back = expand_tree(tree_decompose(g, v), v)
        assert wl_hash(back) == wl_hash(g)


def test_tree_is_acyclic():
    graphs = [parse_smiles(s) for s in CORPUS]
    v = extract_ring_vocabulary(graphs)
    for g in graphs:
        t = tree_decompose(g, v)
        assert len(t.edges) <= t.num_nodes - 1 and t.is_connected()


def test_expansion_rejects_misplaced_labels():
    g = parse_smiles("C1=CC=CC=C1C")
    v = extract_ring_vocabulary([g])
    t = tree_decompose(g, v)
    ring = [k for k in range(t.num_nodes) if len(t.meta["members"][k]) > 1][0]
    bad = t.labels.copy()
    bad[ring] = 0  # atom label on a ring
    with pytest.raises(ExpansionError):
        expand_tree(t.with_labels(bad), v)
    bad = t.labels.copy()
    bad[1 - ring] = t.labels[ring]  # cluster label on a single atom
    with pytest.raises(ExpansionError):
        expand_tree(t.with_labels(bad), v)


def test_vocab_serialisation():
    v = extract_ring_vocabulary([parse_smiles(s) for s in CORPUS])
    assert ClusterVocabulary.from_dict(v.to_dict()) == v
