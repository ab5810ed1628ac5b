"""Adaptive Dormand-Prince integration, log-density augmentation and adjoint gradients.

A *dynamics* object exposes ``shape`` (M, K), ``n_params`` and three calls:

    f(t, z) -> dz
    f_trace(t, z) -> (dz, per-node trace of the diagonal Jacobian blocks)
    vjp(t, z, w, c) -> (dz, w.df/dz + c.dtr/dz, w.df/dtheta + c.dtr/dtheta)

``EgnnDynamics`` (egnn.py) and ``LinearDynamics`` (below) implement it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SolverError(RuntimeError):
    pass


class MaxStepsExceeded(SolverError):
    pass


class StepUnderflow(SolverError):
    pass


class NonFiniteState(SolverError):
    pass


SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
UNDERFLOW = 1e-12

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class SolverConfig:
    rtol: float = 1e-5
    atol: float = 1e-5
    initial_step: float = 1e-2
    max_steps: int = 10_000
    t_start: float = 0.0
    t_end: float = 1.0

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.initial_step <= 0:
            raise ValueError("initial_step must be positive")


@dataclass
class SolverStats:
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0
    times: list = field(default_factory=list, repr=False)  # end time of every accepted step

    def __add__(self, other):
        return SolverStats(self.nfe + other.nfe, self.accepted + other.accepted, self.rejected + other.rejected,
                           self.times + other.times)


@dataclass
class AugmentedState:
    """Scores plus per-node log-density change.

    ``logdet`` is always the correction such that
    log p_T(z(T)) = log p_0(z(0)) + logdet, i.e. -int_0^T tr dt per node.
    """

    z: np.ndarray
    logdet: np.ndarray
    t: float
    stats: SolverStats = field(default_factory=SolverStats)


def dopri5_integrate(fun, t0, t1, y0, rtol=1e-5, atol=1e-5, initial_step=1e-2,
                     max_steps=10_000, norm_mask=None):
    """Integrate dy/dt = fun(t, y) from t0 to t1 (t1 < t0 allowed).

    The step error is the RMS of err / (atol + rtol * max(|y0|, |y1|)) over
    the components selected by ``norm_mask`` (all by default).
    Returns (y1, SolverStats).
    """
    y = np.array(y0, dtype=np.float64).ravel()
    stats = SolverStats()
    span = t1 - t0
    if span == 0:
        return y.copy(), stats
    direction = np.sign(span)
    h = direction * min(initial_step, abs(span))
    t = t0
    mask = slice(None) if norm_mask is None else np.asarray(norm_mask, dtype=bool)
    k1 = _eval(fun, t, y, stats)
    ks = np.empty((7, y.size))
    while direction * (t1 - t) > 0:
        if stats.accepted + stats.rejected >= max_steps:
            raise MaxStepsExceeded(f"exceeded {max_steps} steps at t={t}")
        if abs(h) < UNDERFLOW * abs(span):
            raise StepUnderflow(f"step {abs(h):.3e} below {UNDERFLOW} * |T| at t={t}")
        last = direction * (t + h - t1) >= 0
        if last:
            h = t1 - t
        ks[0] = k1
        for s in range(1, 7):
            ys = y + h * (np.asarray(_A[s]) @ ks[:s])
            ks[s] = _eval(fun, t + _C[s] * h, ys, stats, check=False)
        y_new = y + h * (_B5 @ ks)
        err = h * (_E @ ks)
        if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(ks))):
            stats.rejected += 1
            h *= MIN_FACTOR
            continue
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = (err / scale)[mask]
        err_norm = float(np.sqrt(np.mean(ratio ** 2))) if ratio.size else 0.0
        if err_norm <= 1.0:
            stats.accepted += 1
            t = t1 if last else t + h
            stats.times.append(t)
            y = y_new
            k1 = ks[6].copy()  # first-same-as-last
            factor = MAX_FACTOR if err_norm == 0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_norm ** -0.2))
        else:
            stats.rejected += 1
            factor = min(1.0, max(MIN_FACTOR, SAFETY * err_norm ** -0.2))
        h *= factor
    return y, stats


def _eval(fun, t, y, stats, check=True):
    stats.nfe += 1
    out = np.asarray(fun(t, y), dtype=np.float64).ravel()
    if check and not np.all(np.isfinite(out)):
        raise NonFiniteState(f"non-finite derivative at t={t}")
    return out


def _solver_kwargs(cfg: SolverConfig):
    return dict(rtol=cfg.rtol, atol=cfg.atol, initial_step=cfg.initial_step, max_steps=cfg.max_steps)


def integrate_logdet(dyn, z_start, t_start, t_end, cfg: SolverConfig) -> AugmentedState:
    """Jointly integrate scores and log-density change from t_start to t_end.

    The log-density rate is -tr going forward in time and +tr in reverse, so
    the returned ``logdet`` is -int tr dt over the covered interval with its
    natural orientation (lower to upper bound) in both directions.
    """
    M, K = dyn.shape
    z_start = np.asarray(z_start, dtype=np.float64)
    if z_start.shape != (M, K):
        raise ValueError(f"state shape {z_start.shape} != {(M, K)}")
    if not np.all(np.isfinite(z_start)):
        raise NonFiniteState("non-finite initial state")
    sign = -1.0 if t_end >= t_start else 1.0

    def rhs(t, y):
        dz, tr = dyn.f_trace(t, y[:M * K].reshape(M, K))
        return np.concatenate([dz.ravel(), sign * tr])

    y0 = np.concatenate([z_start.ravel(), np.zeros(M)])
    y1, stats = dopri5_integrate(rhs, t_start, t_end, y0, **_solver_kwargs(cfg))
    return AugmentedState(y1[:M * K].reshape(M, K), y1[M * K:], t_end, stats)


def integrate_forward_logdet(dyn, z0, cfg: SolverConfig) -> AugmentedState:
    return integrate_logdet(dyn, z0, cfg.t_start, cfg.t_end, cfg)


def integrate_reverse(dyn, zT, cfg: SolverConfig) -> AugmentedState:
    return integrate_logdet(dyn, zT, cfg.t_end, cfg.t_start, cfg)


def integrate_states(dyn, z_start, t_start, t_end, cfg: SolverConfig):
    """Scores only, no density bookkeeping (generation/decoding path)."""
    M, K = dyn.shape
    y1, stats = dopri5_integrate(lambda t, y: dyn.f(t, y.reshape(M, K)), t_start, t_end,
                                 np.asarray(z_start, dtype=np.float64), **_solver_kwargs(cfg))
    return y1.reshape(M, K), stats


@dataclass
class AdjointResult:
    grad_params: np.ndarray
    grad_z_start: np.ndarray
    z_start: np.ndarray
    stats: SolverStats


def adjoint_gradient(dyn, z_end, t_start, t_end, grad_z_end, grad_logdet, cfg: SolverConfig,
                     seminorm=True) -> AdjointResult:
    """Gradients of a terminal loss L(z(t_end), logdet(t_end)) by the adjoint method.

    ``z_end`` is the state reached by ``integrate_logdet`` from t_start; the
    state is re-integrated backward alongside the costate, so no trajectory
    is stored. ``grad_logdet`` is dL/dlogdet per node, which stays constant
    since logdet does not feed back into the dynamics. With ``seminorm`` the
    parameter accumulator is left out of the step-error norm.
    """
    M, K = dyn.shape
    n, P = M * K, dyn.n_params
    sign = -1.0 if t_end >= t_start else 1.0
    c = sign * np.asarray(grad_logdet, dtype=np.float64).reshape(M)
    if not np.any(c):
        c = None

    def rhs(t, y):
        z = y[:n].reshape(M, K)
        a = y[n:2 * n].reshape(M, K)
        dz, bar_z, bar_p = dyn.vjp(t, z, a, c)
        return np.concatenate([np.ravel(dz), -np.ravel(bar_z), -bar_p])

    y0 = np.concatenate([np.ravel(z_end), np.ravel(grad_z_end), np.zeros(P)])
    mask = None
    if seminorm:
        mask = np.zeros(y0.size, dtype=bool)
        mask[:2 * n] = True
    y1, stats = dopri5_integrate(rhs, t_end, t_start, y0, norm_mask=mask, **_solver_kwargs(cfg))
    return AdjointResult(y1[2 * n:], y1[n:2 * n].reshape(M, K), y1[:n].reshape(M, K), stats)


class LinearDynamics:
    """f_i(z) = A_i z_i with per-node K x K blocks; parameters are the blocks."""

    def __init__(self, blocks):
        self.blocks = np.asarray(blocks, dtype=np.float64)
        M, K, K2 = self.blocks.shape
        if K != K2:
            raise ValueError("blocks must be square")
        self.shape = (M, K)
        self.n_params = self.blocks.size

    def f(self, t, z):
        return np.einsum("ikl,il->ik", self.blocks, z)

    def f_trace(self, t, z):
        return self.f(t, z), np.trace(self.blocks, axis1=1, axis2=2).copy()

    def vjp(self, t, z, w, c=None):
        # the trace does not depend on z; its parameter derivative is the identity per block
        bar_z = np.einsum("ik,ikl->il", w, self.blocks)
        bar_p = np.einsum("ik,il->ikl", w, z)
        if c is not None:
            bar_p = bar_p + c[:, None, None] * np.eye(self.shape[1])[None]
        return self.f(t, z), bar_z, bar_p.ravel()
