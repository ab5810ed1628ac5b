"""Generation metrics, molecular weight, latent property regression and ascent, histograms."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .chem import VALENCES, check_valency, implicit_hydrogens, max_valence
from .graph import GraphError, LabeledGraph, wl_hash

ATOMIC_WEIGHT = {
    "H": 1.008, "B": 10.81, "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998,
    "P": 30.974, "S": 32.06, "Cl": 35.45, "Br": 79.904, "I": 126.904,
}


class RankDeficient(np.linalg.LinAlgError):
    pass


def is_valid(graph) -> bool:
    if graph is None or graph.alphabet.mode != "atom":
        return False
    return check_valency(graph)[1]


@dataclass
class MetricsReport:
    validity: float
    uniqueness: float
    novelty: float
    reconstruction: float = float("nan")
    samples: int = 0
    empty_valid_set: bool = False
    std: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for name in ("validity", "uniqueness", "novelty", "reconstruction"):
            out.append(("generation", name, getattr(self, name), self.std.get(name, 0.0)))
        out.append(("generation", "samples", self.samples, 0.0))
        return out


def compute_metrics(generated, training_hashes, reconstruction=float("nan")) -> MetricsReport:
    """Validity over all samples; uniqueness and novelty over the valid ones.

    ``generated`` may contain None for samples that could not be decoded
    (e.g. a cluster label on a single atom); those count as invalid.
    """
    generated = list(generated)
    if not generated:
        raise ValueError("metrics need at least one sample")
    valid = [g for g in generated if is_valid(g)]
    validity = 100.0 * len(valid) / len(generated)
    if not valid:
        return MetricsReport(validity, 0.0, 0.0, reconstruction, len(generated), True)
    hashes = {wl_hash(g) for g in valid}
    uniqueness = 100.0 * len(hashes) / len(valid)
    training_hashes = set(training_hashes)
    novelty = 100.0 * sum(h not in training_hashes for h in hashes) / len(hashes)
    return MetricsReport(validity, uniqueness, novelty, reconstruction, len(generated))


def aggregate_reports(reports) -> MetricsReport:
    """Mean and std across seeds."""
    names = ("validity", "uniqueness", "novelty", "reconstruction")
    vals = {n: np.array([getattr(r, n) for r in reports], dtype=float) for n in names}
    return MetricsReport(*(float(vals[n].mean()) for n in names), samples=sum(r.samples for r in reports),
                         empty_valid_set=any(r.empty_valid_set for r in reports),
                         std={n: float(vals[n].std()) for n in names})


def shuffled_label_validity(skeletons, label_probs, alphabet, table=VALENCES) -> float:
    """Exact expected validity (%) when every node draws a label i.i.d. from ``label_probs``.

    A node with bond-order sum s is valid with probability sum_k p_k [maxval_k >= s];
    nodes are independent, so a molecule is valid with the product.
    """
    caps = np.array([max_valence(s, table) for s in alphabet.labels])
    p = np.asarray(label_probs, dtype=float)
    total = 0.0
    for g in skeletons:
        s = g.bond_sums()
        total += float(np.prod([(p * (caps >= si)).sum() for si in s]))
    return 100.0 * total / len(skeletons)


def label_marginal(corpus, K) -> np.ndarray:
    counts = np.bincount(np.concatenate([g.labels for g in corpus]), minlength=K).astype(float)
    return counts / counts.sum()


def property_mw(graph: LabeledGraph) -> float:
    """Molecular weight with implicit hydrogens filling the valence slack."""
    if graph.alphabet.mode != "atom":
        raise GraphError("molecular weight needs an atom-mode graph")
    try:
        heavy = sum(ATOMIC_WEIGHT[s] for s in graph.symbols())
    except KeyError as exc:
        raise GraphError(f"no atomic weight for {exc.args[0]!r}") from None
    return float(heavy + ATOMIC_WEIGHT["H"] * implicit_hydrogens(graph).sum())


def ring_count(graph):
    from .rings import find_rings
    return len(find_rings(graph))


def heavy_atoms(graph):
    return graph.num_nodes


@dataclass
class PropertyModel:
    weights: np.ndarray
    bias: float
    name: str = "mw"
    r2: float = 0.0

    def predict_pooled(self, pooled):
        return np.asarray(pooled) @ self.weights + self.bias

    def predict_latent(self, z0):
        return float(self.predict_pooled(np.asarray(z0).mean(axis=0)))

    def latent_gradient(self, z0):
        """d prediction / d z0: w / M on every node."""
        M = np.asarray(z0).shape[0]
        return np.broadcast_to(self.weights / M, np.shape(z0)).copy()


def fit_linear(X, y, ridge=1e-8, name="property") -> PropertyModel:
    """Least squares with an unpenalised intercept and a small ridge on the weights."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, K = X.shape
    if n < K + 1:
        raise RankDeficient(f"need at least {K + 1} samples, got {n}")
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    A = Xc.T @ Xc + ridge * np.eye(K)
    if np.linalg.matrix_rank(A) < K:
        raise RankDeficient("design matrix is rank deficient")
    w = np.linalg.solve(A, Xc.T @ (y - ym))
    b = float(ym - xm @ w)
    ss_tot = float(((y - ym) ** 2).sum())
    resid = y - (X @ w + b)
    r2 = 0.0 if ss_tot == 0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return PropertyModel(w, b, name, r2)


def pooled_latents(model, corpus):
    return np.array([model.encode(g).z.mean(axis=0) for g in corpus])


def fit_property_regression(model, corpus, prop=property_mw, name="mw") -> PropertyModel:
    X = pooled_latents(model, corpus)
    y = np.array([prop(g) for g in corpus])
    return fit_linear(X, y, name=name)


@dataclass
class AscentStep:
    step: int
    predicted: float
    graph: object  # decoded molecule, or None when it could not be expanded
    valid: bool
    value: float  # measured property, nan when invalid


def latent_ascent(model, graph, prop_model: PropertyModel, step_size: float, steps: int,
                  prop=property_mw):
    """Z' = Z + step * dY/dZ repeated; every iterate is decoded and annotated."""
    if step_size < 0 or steps < 1:
        raise ValueError("need step_size >= 0 and steps >= 1")
    g = model.prepare(graph)
    topology = g.topology()
    z = model.encode(g).z
    out = []
    for k in range(1, steps + 1):
        z = z + step_size * prop_model.latent_gradient(z)
        try:
            dec = model.decode(z, topology)
        except GraphError:
            dec = None
        ok = is_valid(dec)
        val = prop(dec) if ok else float("nan")
        out.append(AscentStep(k, prop_model.predict_latent(z), dec, ok, val))
    return out


def histogram_rows(prop_name, ref_values, gen_values, bins=20):
    """Fixed-width bins over the joint range: (property, lo, hi, count_ref, count_gen, dens_ref, dens_gen)."""
    ref = np.asarray(ref_values, dtype=float)
    gen = np.asarray(gen_values, dtype=float)
    both = np.concatenate([ref, gen])
    if both.size == 0:
        return []
    lo, hi = float(both.min()), float(both.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    cr, _ = np.histogram(ref, edges)
    cg, _ = np.histogram(gen, edges)
    width = edges[1] - edges[0]
    dr = cr / (cr.sum() * width) if cr.sum() else np.zeros(bins)
    dg = cg / (cg.sum() * width) if cg.sum() else np.zeros(bins)
    return [(prop_name, float(edges[k]), float(edges[k + 1]), int(cr[k]), int(cg[k]), float(dr[k]), float(dg[k]))
            for k in range(bins)]


HIST_HEADER = ("property", "bin_lo", "bin_hi", "count_ref", "count_gen", "density_ref", "density_gen")
PROPERTIES = {"mw": property_mw, "heavy_atoms": heavy_atoms, "rings": ring_count}


def distribution_report(reference, generated, bins=20, properties=None) -> str:
    """CSV histogram table comparing property distributions of two molecule sets."""
    properties = properties or PROPERTIES
    gen_valid = [g for g in generated if is_valid(g)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HIST_HEADER)
    for name, fn in properties.items():
        w.writerows(histogram_rows(name, [fn(g) for g in reference], [fn(g) for g in gen_valid], bins))
    return buf.getvalue()


def metrics_csv(report: MetricsReport, extra=()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "name", "value", "std"))
    w.writerows(report.rows())
    w.writerows(extra)
    return buf.getvalue()
