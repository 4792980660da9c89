"""Minimizer Jacobians of the parametric SOCP by implicit differentiation.

The first-order KKT equalities (stationarity, equality feasibility and both
complementary-slackness families) are linearized around a primal/dual optimum,
giving ``S d(delta) = U d(theta)`` with ``delta = (x, lambda, mu, nu)``. The
Jacobian of ``x`` is read off the top rows of ``pinv(S) U``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .socp_opf import ConeProgram, PrimalDualSolution

STRICT_TOL = 1e-7
SLACK_TOL = 1e-7
TOL_X = 1e-6


class SensitivityError(RuntimeError):
    pass


class InexactRelaxation(SensitivityError):
    pass


class JacobianMissing(SensitivityError):
    pass


@dataclass(eq=False)
class KktSystem:
    S: np.ndarray
    U: np.ndarray
    n_x: int
    n_eq: int
    n_in: int
    cones: np.ndarray  # indices of the cones kept in the system
    quadratic: np.ndarray  # idle inverter cones handled in quadratic form (Remark-style twin)
    dropped: np.ndarray  # idle inverter cones left out
    ineq_degenerate: np.ndarray
    cone_degenerate: np.ndarray

    @property
    def blocks(self) -> dict[str, slice]:
        a = self.n_x
        b = a + self.n_eq
        c = b + self.n_in
        return {"dx": slice(0, a), "dlam": slice(a, b), "dmu": slice(b, c), "dnu": slice(c, self.S.shape[0])}

    @property
    def degenerate(self) -> bool:
        return bool(self.ineq_degenerate.any() or self.cone_degenerate.any())


@dataclass(eq=False)
class SensitivityRecord:
    jac: np.ndarray | None
    exists: bool
    rank: int
    nullity: int
    null_residual: float
    method: str = "svd"
    info: dict = field(default_factory=dict)


def _cone_grad(A, b, x):
    Ax = A @ x
    nrm = np.linalg.norm(Ax)
    return A.T @ Ax / nrm - b, Ax, nrm


def build_su(cp: ConeProgram, sol: PrimalDualSolution, strict_tol: float = STRICT_TOL,
             slack_tol: float = SLACK_TOL, idle_tol: float = 1e-9, idle: str = "drop") -> KktSystem:
    """Assemble the linearized KKT system at ``sol``.

    Idle inverter cones (``p^g = q^g = 0``) are not differentiable in SOC form.
    With ``idle="drop"`` they are left out; with ``idle="quadratic"`` the
    differentiable twin ``||A x||^2 - f^2 <= 0`` with zero multiplier is used.
    """
    if idle not in ("drop", "quadratic"):
        raise ValueError("idle must be 'drop' or 'quadratic'")
    ps = cp.socp
    x = sol.x
    n = ps.n_x
    A_e, A_i = ps.A_e, ps.A_i
    n_eq, n_in = A_e.shape[0], A_i.shape[0]
    keep, quad, dropped = [], [], []
    for m, cn in enumerate(ps.cones):
        nrm = np.linalg.norm(cn.A @ x)
        if nrm <= idle_tol:
            if cn.kind == "relax":
                raise InexactRelaxation(f"relaxation cone at bus {cn.bus} has ||A x|| = {nrm:.2e}")
            (quad if idle == "quadratic" else dropped).append(m)
        else:
            keep.append(m)
    rows = keep + quad
    K = len(rows)
    dim = n + n_eq + n_in + K
    # column offsets (dx, dlam, dmu, dnu) and row offsets of the four equation blocks
    c_l, c_m, c_n = n, n + n_eq, n + n_eq + n_in
    r_s, r_i0, r_c = n_eq, n_eq + n, n_eq + n + n_in

    S = np.zeros((dim, dim))
    S[:n_eq, :n] = A_e
    S21 = np.zeros((n, n))
    S24 = np.zeros((n, K))
    h = np.zeros(K)
    nu = np.zeros(K)
    for j, m in enumerate(rows):
        cn = ps.cones[m]
        if m in quad:
            S24[:, j] = 2 * cn.A.T @ (cn.A @ x)
            h[j] = float(np.sum((cn.A @ x) ** 2) - cn.f ** 2)
            continue
        cols = cn.cols
        A, b = cn.A[:, cols], cn.b[cols]
        g, Ax, nrm = _cone_grad(A, b, x[cols])
        AtAx = A.T @ Ax
        S21[np.ix_(cols, cols)] += sol.nu[m] * (A.T @ A / nrm - np.outer(AtAx, AtAx) / nrm ** 3)
        S24[cols, j] = g
        h[j] = nrm - b @ x[cols] - cn.f
        nu[j] = sol.nu[m]
    S[r_s:r_i0, :n] = S21
    S[r_s:r_i0, c_l:c_m] = A_e.T
    S[r_s:r_i0, c_m:c_n] = A_i.T
    S[r_s:r_i0, c_n:] = S24
    r_i = A_i @ x - cp.b_i
    S[r_i0:r_c, :n] = sol.mu[:, None] * A_i
    S[r_i0:r_c, c_m:c_n] = np.diag(r_i)
    S[r_c:, :n] = nu[:, None] * S24.T
    S[r_c:, c_n:] = np.diag(h)

    U = np.zeros((dim, ps.M))
    U[:n_eq] = ps.B_e
    U[r_i0:r_c] = sol.mu[:, None] * ps.B_i

    ineq_deg = (-r_i <= slack_tol) & (sol.mu < strict_tol)
    cone_deg = np.zeros(K, dtype=bool)
    for j, m in enumerate(rows):
        if m not in quad:
            cone_deg[j] = (-h[j] <= slack_tol) and (nu[j] < strict_tol)
    return KktSystem(S, U, n, n_eq, n_in, np.array(rows, dtype=int), np.array(quad, dtype=int),
                     np.array(dropped, dtype=int), ineq_deg, cone_deg)


def strict_complementarity(cp: ConeProgram, sol: PrimalDualSolution, strict_tol: float = STRICT_TOL,
                           slack_tol: float = SLACK_TOL) -> bool:
    """True iff binding constraints carry duals >= strict_tol and only those do."""
    ps = cp.socp
    slack = cp.b_i - ps.A_i @ sol.x
    bind = slack <= slack_tol
    pos = sol.mu >= strict_tol
    if np.any(bind != pos):
        return False
    for m, cn in enumerate(ps.cones):
        gap = cn.b @ sol.x + cn.f - np.linalg.norm(cn.A @ sol.x)
        if (gap <= slack_tol) != (sol.nu[m] >= strict_tol):
            return False
    return True


def _svd(S: np.ndarray, rank_tol: float | None):
    U, s, Vt = sla.svd(S, lapack_driver="gesdd")
    smax = s[0] if s.size else 0.0
    tol = (rank_tol if rank_tol is not None else max(S.shape) * np.finfo(float).eps) * smax
    r = int(np.sum(s > tol))
    return U, s, Vt, r


def check_existence(k: KktSystem, tol: float | None = None, tol_x: float = TOL_X,
                    _svd_cache=None) -> tuple[bool, float]:
    """Null-space sparsity test: every null vector of S must vanish on its dx block."""
    U, s, Vt, r = _svd_cache if _svd_cache is not None else _svd(k.S, tol)
    null = Vt[r:]
    if null.shape[0] == 0:
        return True, 0.0
    res = float(np.max(np.abs(null[:, :k.n_x])))
    return res <= tol_x, res


def solve_sensitivities(k: KktSystem, tol: float | None = None, tol_x: float = TOL_X,
                        method: str = "svd") -> SensitivityRecord:
    """Jacobian of x with respect to theta as the dx rows of pinv(S) U.

    ``method="auto"`` first tries an LU solve and keeps it when S is well
    conditioned (reciprocal condition above 1e-12), falling back to the SVD.
    """
    if method not in ("svd", "auto"):
        raise ValueError("method must be 'svd' or 'auto'")
    dim = k.S.shape[0]
    if method == "auto":
        lu, piv = sla.lu_factor(k.S, check_finite=False)
        anorm = np.linalg.norm(k.S, 1)
        rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
        if info == 0 and rcond > 1e-12:
            X = sla.lu_solve((lu, piv), k.U, check_finite=False)
            return SensitivityRecord(X[:k.n_x], True, dim, 0, 0.0, "lu", {"rcond": float(rcond)})
    cache = _svd(k.S, tol)
    exists, res = check_existence(k, tol, tol_x, _svd_cache=cache)
    U, s, Vt, r = cache
    if not exists:
        return SensitivityRecord(None, False, r, dim - r, res, "svd")
    # dx rows of V_r diag(1/s_r) U_r' U_theta
    jac = (Vt[:r, :k.n_x].T / s[:r]) @ (U[:, :r].T @ k.U)
    return SensitivityRecord(jac, True, r, dim - r, res, "svd")


def jacobian(cp: ConeProgram, sol: PrimalDualSolution, method: str = "svd", **kw) -> SensitivityRecord:
    """Convenience wrapper: assemble and solve, tagging degenerate instances."""
    ksys = build_su(cp, sol, **kw)
    rec = solve_sensitivities(ksys, method=method)
    rec.info["degenerate"] = ksys.degenerate
    return rec
