"""Linearized OPF baseline.

Voltages follow the affine model ``v = R p + X q + v0 1`` with path-intersection
matrices, losses are approximated by ``p'R p + q'R q`` and the inverter disc is
replaced by 16 pairs of half-planes (a 32-sided polygon). Line-current limits
are not modeled. The resulting QP is solved with the same conic backend as the
SOCP and then refined on its active set.
"""

from __future__ import annotations

from dataclasses import dataclass

import clarabel
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .feeder import FeederModel, GridConditions
from .socp_opf import OpfInfeasible, OpfSolveError

N_FACETS = 16


@dataclass(frozen=True, eq=False)
class LinearGridModel:
    R: np.ndarray
    X: np.ndarray
    v0: float = 1.0

    def voltages(self, p, q) -> np.ndarray:
        return self.R @ p + self.X @ q + self.v0


def path_matrix(f: FeederModel) -> np.ndarray:
    """``Pm[n-1, l-1] = 1`` iff line ``l`` lies on the path from bus ``n`` to the substation."""
    N = f.N
    Pm = np.zeros((N, N))
    for n in range(1, N + 1):
        for l in f.path(n):
            Pm[n - 1, l - 1] = 1.0
    return Pm


def build_rx(f: FeederModel, v0: float | None = None) -> LinearGridModel:
    Pm = path_matrix(f)
    R = 2 * (Pm * f.r) @ Pm.T
    X = 2 * (Pm * f.x) @ Pm.T
    # both are Gram matrices of a triangular factor, hence PD; factorize to confirm
    sla.cholesky(R, lower=True)
    sla.cholesky(X, lower=True)
    if v0 is None:
        v0 = f.v0_fixed if f.v0_fixed is not None else 1.0
    return LinearGridModel(R, X, float(v0))


def polytope(Ng: int, sbar) -> tuple[np.ndarray, np.ndarray]:
    """Half-planes ``G [pg; qg] <= h`` of the 32-sided inverter polygons."""
    k = np.arange(1, N_FACETS + 1)
    c, s = np.cos(k * np.pi / N_FACETS), np.sin(k * np.pi / N_FACETS)
    sbar = np.asarray(sbar, dtype=float)
    G = np.zeros((2 * N_FACETS * Ng, 2 * Ng))
    h = np.zeros(2 * N_FACETS * Ng)
    for j in range(Ng):
        rows = slice(2 * N_FACETS * j, 2 * N_FACETS * (j + 1))
        blk = np.zeros((2 * N_FACETS, 2 * Ng))
        blk[:N_FACETS, j] = c
        blk[:N_FACETS, Ng + j] = s
        blk[N_FACETS:] = -blk[:N_FACETS]
        G[rows] = blk
        h[rows] = sbar[j]
    return G, h


@dataclass(eq=False)
class LopfResult:
    pg: np.ndarray
    qg: np.ndarray
    v: np.ndarray  # linearized voltages, buses 1..N
    objective: float
    status: str
    kkt_residual: float


@dataclass(eq=False)
class _Qp:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    const: float


def _assemble(f: FeederModel, lg: LinearGridModel, theta, half_loss: bool) -> _Qp:
    N, Ng = f.N, f.Ng
    theta = theta.theta if isinstance(theta, GridConditions) else np.asarray(theta, dtype=float)
    pl, ql, cap = theta[:N], theta[N:2 * N], theta[2 * N:]
    E = np.zeros((N, Ng))
    E[f.inverter_buses - 1, np.arange(Ng)] = 1.0
    w = 0.5 if half_loss else 1.0
    RE = lg.R @ E
    ERE = E.T @ RE
    # objective over u = [pg; qg] with p = E pg - pl, q = E qg - ql:
    # -1'p + w (p'R p + q'R q)
    P = np.zeros((2 * Ng, 2 * Ng))
    P[:Ng, :Ng] = 2 * w * ERE
    P[Ng:, Ng:] = 2 * w * ERE
    qv = np.concatenate([-np.ones(Ng) - 2 * w * RE.T @ pl, -2 * w * RE.T @ ql])
    const = float(pl.sum() + w * (pl @ lg.R @ pl + ql @ lg.R @ ql))
    # voltage bounds
    Av = np.hstack([lg.R @ E, lg.X @ E])
    v_base = -lg.R @ pl - lg.X @ ql + lg.v0
    G_poly, h_poly = polytope(Ng, f.sbar)
    G = np.vstack([Av, -Av, -np.eye(Ng, 2 * Ng), np.eye(Ng, 2 * Ng), G_poly])
    h = np.concatenate([f.vmax - v_base, v_base - f.vmin, np.zeros(Ng), cap, h_poly])
    return _Qp(P, qv, G, h, const)


def _refine(qp: _Qp, u: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact equality-constrained QP solve on the detected active set."""
    slack = qp.h - qp.G @ u
    act = np.flatnonzero(z > slack)
    n, a = u.size, act.size
    K = np.zeros((n + a, n + a))
    K[:n, :n] = qp.P
    K[:n, n:] = qp.G[act].T
    K[n:, :n] = qp.G[act]
    rhs = np.concatenate([-qp.q, qp.h[act]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    u2 = sol[:n]
    z2 = np.zeros_like(z)
    z2[act] = sol[n:]
    if z2.min(initial=0.0) < 0 or np.any(qp.G @ u2 - qp.h > 1e-12):
        return u, z
    return u2, z2


def kkt_residual(qp: _Qp, u: np.ndarray, z: np.ndarray) -> float:
    slack = qp.h - qp.G @ u
    return float(max(
        np.max(np.abs(qp.P @ u + qp.q + qp.G.T @ z)),
        max(0.0, -slack.min(initial=0.0)),
        max(0.0, -z.min(initial=0.0)),
        np.max(np.abs(z * slack), initial=0.0),
    ))


def solve_lopf(f: FeederModel, theta, v0: float | None = None, lg: LinearGridModel | None = None,
               half_loss: bool = False, tol: float = 1e-10) -> LopfResult:
    """Inverter setpoints from the linearized OPF.

    ``half_loss`` switches the loss surrogate to ``(p'R p + q'R q) / 2``.
    """
    if lg is None or (v0 is not None and lg.v0 != v0):
        lg = build_rx(f, v0)
    qp = _assemble(f, lg, theta, half_loss)
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_gap_abs = s.tol_gap_rel = s.tol_feas = tol
    s.tol_ktratio = 1e-8
    s.presolve_enable = False
    solver = clarabel.DefaultSolver(sp.csc_matrix(np.triu(qp.P)), qp.q, sp.csc_matrix(qp.G), qp.h,
                                    [clarabel.NonnegativeConeT(qp.G.shape[0])], s)
    res = solver.solve()
    st = str(res.status)
    if "Infeasible" in st and "Almost" not in st:
        raise OpfInfeasible(f"LOPF infeasible ({st})")
    if "Solved" not in st:
        raise OpfSolveError(f"LOPF solver status {st}")
    u, z = np.asarray(res.x), np.asarray(res.z)
    u, z = _refine(qp, u, z)
    Ng = f.Ng
    pg, qg = u[:Ng], u[Ng:]
    theta_v = theta.theta if isinstance(theta, GridConditions) else np.asarray(theta, dtype=float)
    p = -theta_v[:f.N].copy()
    q = -theta_v[f.N:2 * f.N].copy()
    p[f.inverter_buses - 1] += pg
    q[f.inverter_buses - 1] += qg
    obj = float(0.5 * u @ qp.P @ u + qp.q @ u + qp.const)
    return LopfResult(pg.copy(), qg.copy(), lg.voltages(p, q), obj, "optimal", kkt_residual(qp, u, z))
