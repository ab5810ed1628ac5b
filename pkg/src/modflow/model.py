"""Encoding, likelihood, adjoint training with Adam, generation and persistence."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from .chem import ensure_coords
from .egnn import EgnnDynamics, EgnnParams, GraphBatch, coord_velocity, init_params, param_shapes
from .graph import ATOM, TREE, AtomAlphabet, LabeledGraph, argmax_labels, onehot_smooth, softmax_rows
from .ode import (AugmentedState, SolverConfig, SolverStats, adjoint_gradient, dopri5_integrate,
                  integrate_logdet, integrate_states)
from .rings import ClusterVocabulary, RingNotInVocabulary, expand_tree, tree_decompose

LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate, batch size and epochs must be non-negative/positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam; returns new (params, state)."""
    step = state.step + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads * grads
    m_hat = m / (1 - cfg.beta1 ** step)
    v_hat = v / (1 - cfg.beta2 ** step)
    new = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new, AdamState(m, v, step)


@dataclass
class ModFlowModel:
    params: EgnnParams
    alphabet: AtomAlphabet
    mode: str = ATOM
    vocab: Optional[ClusterVocabulary] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    eps: float = 0.05
    dim: int = 2
    evolve_coords: bool = False  # experimental: co-evolve x at generation time, no density terms

    def __post_init__(self):
        if self.params.K != self.alphabet.size:
            raise ValueError(f"parameters built for K={self.params.K}, alphabet has {self.alphabet.size}")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if self.mode == TREE and self.vocab is None:
            raise ValueError("tree mode needs a cluster vocabulary")

    @classmethod
    def create(cls, alphabet: AtomAlphabet, seed=0, mode=ATOM, vocab=None, **kw):
        if mode == TREE:
            alphabet = vocab.tree_alphabet(alphabet) if alphabet.mode == ATOM else alphabet
        return cls(init_params(seed, alphabet.size), alphabet, mode, vocab, **kw)

    @property
    def K(self):
        return self.alphabet.size

    def prepare(self, graph: LabeledGraph) -> LabeledGraph:
        """Bring a graph into model space: coordinates, and contraction in tree mode."""
        graph = ensure_coords(graph)
        if self.mode == TREE and graph.alphabet.mode == ATOM:
            graph = tree_decompose(graph, self.vocab)
        if graph.K != self.K or graph.alphabet.labels != self.alphabet.labels:
            raise ValueError("graph alphabet does not match the model alphabet")
        return graph

    def dynamics(self, graphs) -> EgnnDynamics:
        return EgnnDynamics(GraphBatch(graphs, K=self.K), self.params)

    def encode(self, graph: LabeledGraph) -> AugmentedState:
        """Smoothed one-hot at t=T integrated back to t=0 with the log-density change."""
        graph = self.prepare(graph)
        zT = onehot_smooth(graph, self.eps)
        return integrate_logdet(self.dynamics([graph]), zT, self.solver.t_end, self.solver.t_start, self.solver)

    def log_likelihood(self, graph: LabeledGraph) -> float:
        st = self.encode(graph)
        return float(base_log_density(st.z).sum() + st.logdet.sum())

    def decode(self, z0, topology: LabeledGraph) -> LabeledGraph:
        """Forward flow then argmax; in tree mode clusters are expanded back to atoms."""
        topology = ensure_coords(topology)
        zT = self.flow_forward(np.asarray(z0, dtype=np.float64), topology)
        labels = argmax_labels(softmax_rows(zT))
        graph = LabeledGraph(self.alphabet, labels, topology.edges, topology.num_nodes,
                             topology.coords, topology.meta)
        if self.mode == TREE:
            graph = expand_tree(graph, self.vocab)
        return graph

    def flow_forward(self, z0, topology):
        cfg = self.solver
        if not self.evolve_coords:
            zT, _ = integrate_states(self.dynamics([topology]), z0, cfg.t_start, cfg.t_end, cfg)
            return zT
        batch = GraphBatch([topology], K=self.K)
        M, K = z0.shape

        def rhs(t, y):
            batch.set_coords(y[M * K:].reshape(M, -1))
            z = y[:M * K].reshape(M, K)
            dz = EgnnDynamics(batch, self.params).f(t, z)
            return np.concatenate([dz.ravel(), coord_velocity(batch, self.params, t, z).ravel()])

        y0 = np.concatenate([z0.ravel(), batch.x.ravel()])
        y1, _ = dopri5_integrate(rhs, cfg.t_start, cfg.t_end, y0, rtol=cfg.rtol, atol=cfg.atol,
                                 initial_step=cfg.initial_step, max_steps=cfg.max_steps)
        return y1[:M * K].reshape(M, K)

    def generate(self, topology: LabeledGraph, rng: np.random.Generator) -> LabeledGraph:
        """Labels for a given skeleton from z(0) ~ N(0, I); no validity correction."""
        z0 = rng.standard_normal((topology.num_nodes, self.K))
        return self.decode(z0, topology)

    # persistence -----------------------------------------------------------
    def metadata(self) -> dict:
        return {
            "alphabet": self.alphabet.to_dict(),
            "mode": self.mode,
            "vocab": self.vocab.to_dict() if self.vocab is not None else None,
            "solver": asdict(self.solver),
            "eps": self.eps,
            "dim": self.dim,
            "evolve_coords": self.evolve_coords,
            "bond_arity": self.params.bond_arity,
            "hidden": self.params.hidden,
        }

    @classmethod
    def from_metadata(cls, meta: dict, arrays: dict) -> "ModFlowModel":
        alphabet = AtomAlphabet.from_dict(meta["alphabet"])
        shapes = param_shapes(alphabet.size, meta["bond_arity"], meta["hidden"])
        params = EgnnParams({n: arrays[n].reshape(s) for n, s in shapes.items()}, alphabet.size,
                            meta["bond_arity"], meta["hidden"])
        vocab = ClusterVocabulary.from_dict(meta["vocab"]) if meta["vocab"] is not None else None
        return cls(params, alphabet, meta["mode"], vocab, SolverConfig(**meta["solver"]), meta["eps"],
                   meta["dim"], meta["evolve_coords"])


def base_log_density(z):
    """Per-node log N(z_i; 0, I)."""
    z = np.asarray(z)
    return -0.5 * (z ** 2).sum(axis=1) - 0.5 * z.shape[1] * LOG_2PI


@dataclass
class BatchResult:
    loss: float
    grad: np.ndarray
    per_graph: np.ndarray  # log-likelihood of each graph
    stats: SolverStats


def loss_batch(model: ModFlowModel, graphs, with_grad=True) -> BatchResult:
    """-mean log-likelihood of a batch, integrated jointly as one disjoint union.

    The gradient comes from the adjoint pass with terminal conditions
    dL/dz(0) = z(0)/B and dL/dlogdet_i = -1/B.
    """
    graphs = [model.prepare(g) for g in graphs]
    if not graphs:
        raise ValueError("empty batch")
    B = len(graphs)
    dyn = model.dynamics(graphs)
    zT = np.concatenate([onehot_smooth(g, model.eps) for g in graphs])
    cfg = model.solver
    st = integrate_logdet(dyn, zT, cfg.t_end, cfg.t_start, cfg)
    node_ll = base_log_density(st.z) + st.logdet
    per_graph = np.array([s.sum() for s in dyn.batch.split(node_ll)])
    loss = -float(per_graph.mean())
    stats = st.stats
    grad = None
    if with_grad:
        adj = adjoint_gradient(dyn, st.z, cfg.t_end, cfg.t_start, st.z / B, -np.ones(dyn.batch.M) / B, cfg)
        grad = adj.grad_params
        stats = stats + adj.stats
    return BatchResult(loss, grad, per_graph, stats)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    nfe_mean: float


def epoch_order(n, cfg: TrainConfig, epoch: int):
    if not cfg.shuffle:
        return np.arange(n)
    # seeded per epoch so a resumed run reproduces the same order without stored RNG state
    return np.random.default_rng([cfg.seed, epoch]).permutation(n)


def train(model: ModFlowModel, corpus, cfg: TrainConfig, callbacks=(), opt: Optional[AdamState] = None,
          start_epoch: int = 0, checkpoint_dir=None, config_echo=None):
    """Minibatch Adam on -log-likelihood.

    Returns (model, optimizer state, list of EpochRecord). ``callbacks`` are
    called as cb(record, model, opt) after every epoch.
    """
    graphs = [model.prepare(g) for g in corpus]
    if not graphs:
        raise ValueError("training corpus is empty")
    opt = opt if opt is not None else AdamState.zeros(model.params.size)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        order = epoch_order(len(graphs), cfg, epoch)
        total, nfe, nb = 0.0, 0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = [graphs[k] for k in order[s:s + cfg.batch_size]]
            res = loss_batch(model, batch)
            flat, opt = adam_step(model.params.flatten(), res.grad, opt, cfg)
            model.params = model.params.unflatten(flat)
            total += res.loss * len(batch)
            nfe += res.stats.nfe
            nb += 1
        rec = EpochRecord(epoch + 1, total / len(graphs), nfe / nb)
        history.append(rec)
        if checkpoint_dir is not None:
            save_checkpoint(os.path.join(checkpoint_dir, f"epoch_{epoch + 1}.mdfl"), model, opt, epoch + 1,
                            cfg, config_echo)
        for cb in callbacks:
            cb(rec, model, opt)
    return model, opt, history


def save_checkpoint(path, model: ModFlowModel, opt: Optional[AdamState] = None, epoch: int = 0,
                    cfg: Optional[TrainConfig] = None, config_echo=None):
    meta = model.metadata()
    meta["epoch"] = epoch
    meta["step"] = opt.step if opt is not None else 0
    meta["train"] = asdict(cfg) if cfg is not None else None
    meta["config_echo"] = config_echo
    arrays = dict(model.params.arrays)
    if opt is not None:
        arrays["adam_m"] = opt.m
        arrays["adam_v"] = opt.v
    checkpoint.save(path, meta, arrays)


def load_checkpoint(path):
    """Returns (model, AdamState or None, metadata)."""
    meta, arrays = checkpoint.load(path)
    model = ModFlowModel.from_metadata(meta, arrays)
    opt = None
    if "adam_m" in arrays:
        opt = AdamState(arrays["adam_m"], arrays["adam_v"], int(meta["step"]))
    return model, opt, meta


def sample_topology(corpus, rng: np.random.Generator) -> LabeledGraph:
    """Uniformly drawn training skeleton with labels stripped."""
    if not len(corpus):
        raise ValueError("cannot sample a topology from an empty corpus")
    return corpus[int(rng.integers(len(corpus)))].topology()


def prepare_corpus(model: ModFlowModel, corpus):
    """Keep graphs the model can represent; returns (graphs, number skipped)."""
    out, skipped = [], 0
    for g in corpus:
        try:
            out.append(model.prepare(g))
        except RingNotInVocabulary:
            skipped += 1
    return out, skipped
