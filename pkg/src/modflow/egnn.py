"""Single-layer E(n)-equivariant message passing differential with hand-written derivatives.

Shapes: M nodes, E directed edges (each undirected bond appears twice),
K labels, H hidden/message width. Node i receives messages from j over edge
e = (recv=i, send=j). Tangent/cotangent blocks for the trace are laid out
(X, K, H) so every contraction is a plain 2D matmul.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix

from .graph import BOND_ORDERS, LabeledGraph

HIDDEN = 32
BOND_ARITY = len(BOND_ORDERS)


class NumericalOverflow(FloatingPointError):
    pass


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sig(x)


def silu_grads(x):
    """SiLU value, first and second derivative."""
    s = _sig(x)
    d1 = s * (1.0 + x * (1.0 - s))
    d2 = s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
    return x * s, d1, d2


def param_shapes(K: int, bond_arity: int = BOND_ARITY, hidden: int = HIDDEN) -> dict:
    H = hidden
    return {
        # phi_e: [z_i, z_j, |x_i - x_j|^2, a_ij] -> H -> H
        "e_w_zi": (H, K), "e_w_zj": (H, K), "e_w_d": (H,), "e_w_a": (H, bond_arity), "e_b1": (H,),
        "e_w2": (H, H), "e_b2": (H,),
        # phi_h: [z_i, m_i, t] -> H -> K
        "h_w_z": (H, K), "h_w_m": (H, H), "h_w_t": (H,), "h_b1": (H,),
        "h_w2": (K, H), "h_b2": (K,),
        # phi_x: m_ij -> H -> 1, used only by the experimental coordinate flow
        "x_w1": (H, H), "x_b1": (H,), "x_w2": (1, H), "x_b2": (1,),
    }


# fan-in of the layer each weight block belongs to
def _fan_in(K, bond_arity, H):
    return {
        "e_w_zi": 2 * K + 1 + bond_arity, "e_w_zj": 2 * K + 1 + bond_arity,
        "e_w_d": 2 * K + 1 + bond_arity, "e_w_a": 2 * K + 1 + bond_arity,
        "e_w2": H, "h_w_z": K + H + 1, "h_w_m": K + H + 1, "h_w_t": K + H + 1,
        "h_w2": H, "x_w1": H, "x_w2": H,
    }


@dataclass
class EgnnParams:
    arrays: dict
    K: int
    bond_arity: int = BOND_ARITY
    hidden: int = HIDDEN

    @property
    def names(self):
        return list(param_shapes(self.K, self.bond_arity, self.hidden))

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in param_shapes(self.K, self.bond_arity, self.hidden).values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.names])

    def unflatten(self, flat) -> "EgnnParams":
        flat = np.asarray(flat, dtype=np.float64)
        out, k = {}, 0
        for n, s in param_shapes(self.K, self.bond_arity, self.hidden).items():
            size = int(np.prod(s))
            out[n] = flat[k:k + size].reshape(s).copy()
            k += size
        if k != flat.size:
            raise ValueError(f"expected {k} parameters, got {flat.size}")
        return EgnnParams(out, self.K, self.bond_arity, self.hidden)

    def copy(self) -> "EgnnParams":
        return EgnnParams({n: a.copy() for n, a in self.arrays.items()}, self.K, self.bond_arity, self.hidden)

    def zero_output(self) -> "EgnnParams":
        """Copy with the last layer of phi_h zeroed, i.e. f == 0."""
        p = self.copy()
        p.arrays["h_w2"][:] = 0.0
        p.arrays["h_b2"][:] = 0.0
        return p


def init_params(seed: int, K: int, bond_arity: int = BOND_ARITY, hidden: int = HIDDEN) -> EgnnParams:
    if K < 2:
        raise ValueError("K must be >= 2")
    rng = np.random.default_rng(seed)
    fan = _fan_in(K, bond_arity, hidden)
    arrays = {}
    for n, s in param_shapes(K, bond_arity, hidden).items():
        if n in fan:
            bound = 1.0 / np.sqrt(fan[n])
            arrays[n] = rng.uniform(-bound, bound, size=s)
        else:
            arrays[n] = np.zeros(s)
    return EgnnParams(arrays, K, bond_arity, hidden)


class GraphBatch:
    """Static part of the differential input: a disjoint union of graphs.

    Coordinates do not evolve, so squared distances and bond one-hots are
    computed once here.
    """

    def __init__(self, graphs, K=None):
        graphs = list(graphs)
        if not graphs:
            raise ValueError("empty batch")
        self.K = graphs[0].K if K is None else K
        self.sizes = np.array([g.num_nodes for g in graphs])
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.M = int(self.offsets[-1])
        recv, send, bond, coords = [], [], [], []
        for g, off in zip(graphs, self.offsets):
            if g.coords is None:
                raise ValueError("graph has no coordinates; apply a layout first")
            coords.append(g.coords)
            e = g.edges
            if len(e):
                recv += [e[:, 0] + off, e[:, 1] + off]
                send += [e[:, 1] + off, e[:, 0] + off]
                bond += [e[:, 2], e[:, 2]]
        D = {c.shape[1] for c in coords}
        if len(D) != 1:
            raise ValueError("mixed coordinate dimensions in one batch")
        self.x = np.concatenate(coords)
        self.recv = np.concatenate(recv).astype(np.int64) if recv else np.zeros(0, np.int64)
        self.send = np.concatenate(send).astype(np.int64) if send else np.zeros(0, np.int64)
        b = np.concatenate(bond) if bond else np.zeros(0, np.int64)
        self.E = len(self.recv)
        self.bond_onehot = np.zeros((self.E, BOND_ARITY))
        self.bond_onehot[np.arange(self.E), b - 1] = 1.0
        self.set_coords(self.x)
        ones = np.ones(self.E)
        self.S_recv = csr_matrix((ones, (self.recv, np.arange(self.E))), shape=(self.M, self.E))
        self.S_send = csr_matrix((ones, (self.send, np.arange(self.E))), shape=(self.M, self.E))
        self.degree = np.bincount(self.recv, minlength=self.M)
        self.node_graph = np.repeat(np.arange(len(graphs)), self.sizes)

    def set_coords(self, x):
        self.x = np.asarray(x, dtype=np.float64)
        diff = self.x[self.recv] - self.x[self.send]
        self.d2 = (diff ** 2).sum(axis=1)

    def split(self, arr):
        return [arr[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    @classmethod
    def single(cls, graph: LabeledGraph):
        return cls([graph])


def _segment_sum_ordered(vals, recv, M):
    """Per-node sum with a summation order fixed by the values themselves.

    Sorting contributions by (receiver, value) before reduction makes the
    result independent of edge ordering, hence bit-exact under relabeling.
    """
    out = np.zeros((M,) + vals.shape[1:])
    if len(recv) == 0:
        return out
    order = np.lexsort((vals[:, 1], vals[:, 0], recv))
    r = recv[order]
    starts = np.flatnonzero(np.r_[True, r[1:] != r[:-1]])
    out[r[starts]] = np.add.reduceat(vals[order], starts, axis=0)
    return out


def _lin(a, w):
    """a @ w.T with each output row computed independently of its position.

    BLAS may take a different accumulation path for some rows of narrow
    products, which would break exact permutation equivariance.
    """
    return np.einsum("...h,gh->...g", a, w)


class _Primal:
    """Forward intermediates shared by the value, trace and VJP passes."""

    def __init__(self, batch: GraphBatch, p: EgnnParams, t: float, z: np.ndarray, exact=True):
        self.t = t
        self.z = z
        zi = _lin(z, p["e_w_zi"])
        zj = _lin(z, p["e_w_zj"])
        self.u1 = (zi[batch.recv] + zj[batch.send] + batch.d2[:, None] * p["e_w_d"]
                   + _lin(batch.bond_onehot, p["e_w_a"]) + p["e_b1"])
        self.h1, self.s1, self.ss1 = silu_grads(self.u1)
        self.u2 = _lin(self.h1, p["e_w2"]) + p["e_b2"]
        self.me, self.s2, self.ss2 = silu_grads(self.u2)
        if exact:
            self.m = _segment_sum_ordered(self.me, batch.recv, batch.M)
        else:
            self.m = batch.S_recv @ self.me
        self.v = _lin(z, p["h_w_z"]) + _lin(self.m, p["h_w_m"]) + t * p["h_w_t"] + p["h_b1"]
        self.g, self.s3, self.ss3 = silu_grads(self.v)
        self.f = _lin(self.g, p["h_w2"]) + p["h_b2"]
        if not np.all(np.isfinite(self.f)):
            raise NumericalOverflow("non-finite value in differential")


class _Tangent:
    """K self-directional derivatives: d f_i / d z_i along each basis vector."""

    def __init__(self, batch: GraphBatch, p: EgnnParams, pr: _Primal):
        E, M, K, H = batch.E, batch.M, p.K, p.hidden
        wziT = p["e_w_zi"].T  # (K, H)
        self.dh1 = pr.s1[:, None, :] * wziT[None]
        self.du2 = (self.dh1.reshape(E * K, H) @ p["e_w2"].T).reshape(E, K, H)
        dme = pr.s2[:, None, :] * self.du2
        self.dm = (batch.S_recv @ dme.reshape(E, K * H)).reshape(M, K, H)
        self.dv = p["h_w_z"].T[None] + (self.dm.reshape(M * K, H) @ p["h_w_m"].T).reshape(M, K, H)
        self.dg = pr.s3[:, None, :] * self.dv
        self.trace = np.einsum("ikh,kh->i", self.dg, p["h_w2"])


def egnn_forward(batch: GraphBatch, params: EgnnParams, t: float, z: np.ndarray) -> np.ndarray:
    return _Primal(batch, params, t, z).f


def forward_with_trace(batch, params, t, z, exact=True):
    pr = _Primal(batch, params, t, z, exact=exact)
    tg = _Tangent(batch, params, pr)
    return pr.f, tg.trace


def trace_jacobian(batch, params, t, z) -> np.ndarray:
    """Exact tr(d f_i / d z_i) per node."""
    return forward_with_trace(batch, params, t, z)[1]


def egnn_vjp(batch, params, t, z, w, c=None):
    """Reverse-mode derivative of (f, trace) contracted with cotangents (w, c).

    Returns (w.df/dz + c.dtr/dz, w.df/dtheta + c.dtr/dtheta) with the
    parameter part flattened in ``EgnnParams.flatten`` order.
    """
    return _vjp(batch, params, t, z, w, c)[1:]


def _vjp(batch, params, t, z, w, c=None):
    p = params
    pr = _Primal(batch, p, t, z)
    E, M, K, H = batch.E, batch.M, p.K, p.hidden
    g = {n: np.zeros_like(a) for n, a in p.arrays.items()}
    w = np.asarray(w, dtype=np.float64)

    bar_v = np.zeros((M, H))
    bar_u2 = np.zeros((E, H))
    bar_u1 = np.zeros((E, H))
    if c is not None:
        c = np.asarray(c, dtype=np.float64)
        tg = _Tangent(batch, p, pr)
        bar_dg = c[:, None, None] * p["h_w2"][None]
        g["h_w2"] += np.einsum("i,ikh->kh", c, tg.dg)
        bar_dv = pr.s3[:, None, :] * bar_dg
        bar_v += pr.ss3 * (bar_dg * tg.dv).sum(axis=1)
        g["h_w_z"] += bar_dv.sum(axis=0).T
        g["h_w_m"] += bar_dv.reshape(M * K, H).T @ tg.dm.reshape(M * K, H)
        bar_dm = (bar_dv.reshape(M * K, H) @ p["h_w_m"]).reshape(M, K, H)
        bar_dme = bar_dm[batch.recv]
        bar_du2 = pr.s2[:, None, :] * bar_dme
        bar_u2 += pr.ss2 * (bar_dme * tg.du2).sum(axis=1)
        g["e_w2"] += bar_du2.reshape(E * K, H).T @ tg.dh1.reshape(E * K, H)
        bar_dh1 = (bar_du2.reshape(E * K, H) @ p["e_w2"]).reshape(E, K, H)
        g["e_w_zi"] += (pr.s1[:, None, :] * bar_dh1).sum(axis=0).T
        bar_u1 += pr.ss1 * (bar_dh1 * p["e_w_zi"].T[None]).sum(axis=1)

    g["h_w2"] += w.T @ pr.g
    g["h_b2"] += w.sum(axis=0)
    bar_v += pr.s3 * (w @ p["h_w2"])
    g["h_w_z"] += bar_v.T @ z
    g["h_w_m"] += bar_v.T @ pr.m
    g["h_w_t"] += bar_v.sum(axis=0) * t
    g["h_b1"] += bar_v.sum(axis=0)
    bar_z = bar_v @ p["h_w_z"]
    bar_m = bar_v @ p["h_w_m"]
    bar_u2 += pr.s2 * bar_m[batch.recv]
    g["e_w2"] += bar_u2.T @ pr.h1
    g["e_b2"] += bar_u2.sum(axis=0)
    bar_u1 += pr.s1 * (bar_u2 @ p["e_w2"])
    zi, zj = z[batch.recv], z[batch.send]
    g["e_w_zi"] += bar_u1.T @ zi
    g["e_w_zj"] += bar_u1.T @ zj
    g["e_w_d"] += bar_u1.T @ batch.d2
    g["e_w_a"] += bar_u1.T @ batch.bond_onehot
    g["e_b1"] += bar_u1.sum(axis=0)
    bar_z = bar_z + batch.S_recv @ (bar_u1 @ p["e_w_zi"]) + batch.S_send @ (bar_u1 @ p["e_w_zj"])
    flat = np.concatenate([g[n].ravel() for n in p.names])
    return pr.f, bar_z, flat


class EgnnDynamics:
    """The differential bound to one batch of graphs, in the solver interface."""

    def __init__(self, batch: GraphBatch, params: EgnnParams):
        self.batch = batch
        self.params = params
        self.shape = (batch.M, params.K)
        self.n_params = params.size

    def f(self, t, z):
        return egnn_forward(self.batch, self.params, t, z)

    def f_trace(self, t, z):
        return forward_with_trace(self.batch, self.params, t, z)

    def vjp(self, t, z, w, c=None):
        return _vjp(self.batch, self.params, t, z, w, c)


def coord_velocity(batch, params, t, z):
    """EGNN coordinate update C * sum_j (x_i - x_j) phi_x(m_ij) with C = 1/|N_i|.

    Only used by the experimental co-evolving coordinate flow, which carries
    no density terms.
    """
    p = params
    pr = _Primal(batch, p, t, z, exact=False)
    a = silu(pr.me @ p["x_w1"].T + p["x_b1"]) @ p["x_w2"].T + p["x_b2"]
    rel = batch.x[batch.recv] - batch.x[batch.send]
    dx = batch.S_recv @ (rel * a)
    deg = np.maximum(batch.degree, 1)[:, None]
    return dx / deg
