"""Parametric SOCP form of the DistFlow OPF and its primal/dual solution.

Decision vector layout::

    x = [p^g (Ng), q^g (Ng), P (N), Q (N), v (N), ell (N), v0]

The program is

    min c'x  s.t.  A_e x = B_e theta + f_e,  A_i x <= B_i theta + f_i,
                   ||A_m x|| <= b_m'x + f_m   (m = 1..N+Ng)

with the first N cones relaxing ell_n = (P_n^2 + Q_n^2)/v_{pi_n} and the last
Ng cones bounding inverter apparent power.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .feeder import FeederModel, GridConditions

log = logging.getLogger(__name__)

KKT_TOL = 1e-8
EXACT_TOL = 1e-6


class OpfSolveError(RuntimeError):
    status = "error"


class OpfInfeasible(OpfSolveError):
    status = "infeasible"


class OpfUnbounded(OpfSolveError):
    status = "unbounded"


class OpfMaxIterations(OpfSolveError):
    status = "max_iterations"


@dataclass(frozen=True)
class Layout:
    N: int
    Ng: int

    @property
    def n(self) -> int:
        return 2 * self.Ng + 4 * self.N + 1

    @property
    def pg(self) -> slice:
        return slice(0, self.Ng)

    @property
    def qg(self) -> slice:
        return slice(self.Ng, 2 * self.Ng)

    def _blk(self, k: int) -> slice:
        s = 2 * self.Ng + k * self.N
        return slice(s, s + self.N)

    @property
    def P(self) -> slice:
        return self._blk(0)

    @property
    def Q(self) -> slice:
        return self._blk(1)

    @property
    def v(self) -> slice:
        return self._blk(2)

    @property
    def ell(self) -> slice:
        return self._blk(3)

    @property
    def v0(self) -> int:
        return self.n - 1

    def vbus(self, n: int) -> int:
        """Column of the squared voltage at internal bus ``n`` (0 is the substation)."""
        return self.v0 if n == 0 else self.v.start + n - 1


@dataclass(frozen=True, eq=False)
class Cone:
    A: np.ndarray  # rows x n_x
    b: np.ndarray  # n_x
    f: float
    kind: str  # "relax" or "inverter"
    bus: int

    @property
    def cols(self) -> np.ndarray:
        """Columns of x touched by this cone."""
        return np.flatnonzero(np.any(self.A != 0, axis=0) | (self.b != 0))


@dataclass(frozen=True, eq=False)
class ParametricSocp:
    feeder: FeederModel
    layout: Layout
    c: np.ndarray
    A_e: np.ndarray
    B_e: np.ndarray
    f_e: np.ndarray
    A_i: np.ndarray
    B_i: np.ndarray
    f_i: np.ndarray
    cones: tuple[Cone, ...]
    offset: np.ndarray  # objective constant = offset @ theta

    @property
    def n_x(self) -> int:
        return self.layout.n

    @property
    def M(self) -> int:
        return self.feeder.M

    @property
    def K(self) -> int:
        return len(self.cones)


@dataclass(eq=False)
class ConeProgram:
    socp: ParametricSocp
    theta: np.ndarray
    b_e: np.ndarray
    b_i: np.ndarray


@dataclass(eq=False)
class PrimalDualSolution:
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    objective: float
    status: str
    residuals: dict = field(default_factory=dict)
    polished: bool = False
    iterations: int = 0

    @property
    def kkt_residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else np.inf


def build_socp(f: FeederModel) -> ParametricSocp:
    """Assemble the parametric SOCP matrices for feeder ``f``.

    The cost is the active power drawn at the substation,
    sum(p^l) - sum(p^g) + sum(r ell); the load term depends only on theta and is
    kept in ``offset``.
    """
    N, Ng = f.N, f.Ng
    L = Layout(N, Ng)
    n = L.n
    M = f.M
    inv_pos = {int(b): i for i, b in enumerate(f.inverter_buses)}

    c = np.zeros(n)
    c[L.pg] = -1.0
    c[L.ell] = f.r
    offset = np.zeros(M)
    offset[:N] = 1.0

    n_eq = 3 * N + (1 if f.v0_fixed is not None else 0)
    A_e = np.zeros((n_eq, n))
    B_e = np.zeros((n_eq, M))
    f_e = np.zeros(n_eq)
    for k in range(1, N + 1):
        i = k - 1
        rp, rq, rv = i, N + i, 2 * N + i
        # p^g_k - sum_children P + P_k - r_k ell_k = p^l_k
        if k in inv_pos:
            A_e[rp, L.pg.start + inv_pos[k]] = 1.0
            A_e[rq, L.qg.start + inv_pos[k]] = 1.0
        for ch in f.children(k):
            A_e[rp, L.P.start + ch - 1] = -1.0
            A_e[rq, L.Q.start + ch - 1] = -1.0
        A_e[rp, L.P.start + i] = 1.0
        A_e[rp, L.ell.start + i] = -f.r[i]
        A_e[rq, L.Q.start + i] = 1.0
        A_e[rq, L.ell.start + i] = -f.x[i]
        B_e[rp, i] = 1.0
        B_e[rq, N + i] = 1.0
        # v_k - v_pi - (r^2 + x^2) ell_k + 2 (r P_k + x Q_k) = 0
        A_e[rv, L.v.start + i] = 1.0
        A_e[rv, L.vbus(int(f.parent[i]))] -= 1.0
        A_e[rv, L.ell.start + i] = -(f.r[i] ** 2 + f.x[i] ** 2)
        A_e[rv, L.P.start + i] = 2 * f.r[i]
        A_e[rv, L.Q.start + i] = 2 * f.x[i]
    if f.v0_fixed is not None:
        A_e[3 * N, L.v0] = 1.0
        f_e[3 * N] = f.v0_fixed

    n_in = 3 * N + 2 * Ng
    A_i = np.zeros((n_in, n))
    B_i = np.zeros((n_in, M))
    f_i = np.zeros(n_in)
    for i in range(N):
        A_i[i, L.ell.start + i] = 1.0
        f_i[i] = f.lbar[i]
        A_i[N + i, L.v.start + i] = 1.0
        f_i[N + i] = f.vmax[i]
        A_i[2 * N + i, L.v.start + i] = -1.0
        f_i[2 * N + i] = -f.vmin[i]
    for j in range(Ng):
        A_i[3 * N + j, L.pg.start + j] = -1.0
        A_i[3 * N + Ng + j, L.pg.start + j] = 1.0
        B_i[3 * N + Ng + j, 2 * N + j] = 1.0

    cones = []
    for k in range(1, N + 1):
        i = k - 1
        vp = L.vbus(int(f.parent[i]))
        A = np.zeros((3, n))
        A[0, L.P.start + i] = 2.0
        A[1, L.Q.start + i] = 2.0
        A[2, vp] = 1.0
        A[2, L.ell.start + i] = -1.0
        b = np.zeros(n)
        b[vp] = 1.0
        b[L.ell.start + i] = 1.0
        cones.append(Cone(A, b, 0.0, "relax", k))
    for j, k in enumerate(f.inverter_buses):
        A = np.zeros((2, n))
        A[0, L.pg.start + j] = 1.0
        A[1, L.qg.start + j] = 1.0
        cones.append(Cone(A, np.zeros(n), float(f.sbar[j]), "inverter", int(k)))

    for arr in (c, A_e, B_e, f_e, A_i, B_i, f_i, offset):
        arr.setflags(write=False)
    return ParametricSocp(f, L, c, A_e, B_e, f_e, A_i, B_i, f_i, tuple(cones), offset)


def instantiate(ps: ParametricSocp, theta) -> ConeProgram:
    if isinstance(theta, GridConditions):
        theta = theta.theta
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (ps.M,):
        raise ValueError(f"theta must have length {ps.M}, got {theta.shape}")
    return ConeProgram(ps, theta, ps.B_e @ theta + ps.f_e, ps.B_i @ theta + ps.f_i)


# -- residuals ---------------------------------------------------------------------


def _cone_terms(ps: ParametricSocp, x: np.ndarray):
    norms = np.array([np.linalg.norm(cn.A @ x) for cn in ps.cones])
    gaps = np.array([cn.b @ x + cn.f for cn in ps.cones]) - norms
    return norms, gaps


def kkt_residuals(cp: ConeProgram, x, lam, mu, nu) -> dict[str, float]:
    """Residuals of the direct-form KKT conditions at a primal/dual point."""
    ps = cp.socp
    norms, gaps = _cone_terms(ps, x)
    grad = ps.c + ps.A_e.T @ lam + ps.A_i.T @ mu
    for m, cn in enumerate(ps.cones):
        if nu[m] == 0.0:
            continue
        if norms[m] > 0:
            grad = grad + nu[m] * (cn.A.T @ (cn.A @ x) / norms[m] - cn.b)
        else:
            grad = grad - nu[m] * cn.b
    slack = cp.b_i - ps.A_i @ x
    return {
        "stationarity": float(np.max(np.abs(grad))),
        "eq_feas": float(np.max(np.abs(ps.A_e @ x - cp.b_e), initial=0.0)),
        "ineq_feas": float(max(0.0, -slack.min(initial=0.0))),
        "cone_feas": float(max(0.0, -gaps.min(initial=0.0))),
        "dual_feas": float(max(0.0, -mu.min(initial=0.0), -nu.min(initial=0.0))),
        "comp_ineq": float(np.max(np.abs(mu * slack), initial=0.0)),
        "comp_cone": float(np.max(np.abs(nu * gaps), initial=0.0)),
    }


# -- solving -----------------------------------------------------------------------


def _clarabel_data(cp: ConeProgram):
    ps = cp.socp
    blocks = [ps.A_e, ps.A_i]
    rhs = [cp.b_e, cp.b_i]
    cones = [clarabel.ZeroConeT(ps.A_e.shape[0]), clarabel.NonnegativeConeT(ps.A_i.shape[0])]
    for cn in ps.cones:
        blocks.append(-cn.b[None, :])
        blocks.append(-cn.A)
        rhs.append(np.array([cn.f]))
        rhs.append(np.zeros(cn.A.shape[0]))
        cones.append(clarabel.SecondOrderConeT(1 + cn.A.shape[0]))
    A = sp.csc_matrix(np.vstack(blocks))
    return A, np.concatenate(rhs), cones


def _settings(tol: float, max_iter: int):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = max_iter
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.tol_feas = tol
    s.tol_ktratio = 1e-8
    s.presolve_enable = False
    return s


def solve(cp: ConeProgram, kkt_tol: float = KKT_TOL, polish: bool = True, max_iter: int = 200,
          solver_tol: float = 1e-10) -> PrimalDualSolution:
    """Solve the cone program and return a primal/dual optimum.

    Duals follow the direct Lagrangian; the cone multiplier ``nu_m`` is the
    first entry of the conic dual. The interior-point result is refined by a
    Newton step on the active-set KKT equations when ``polish`` is set.
    """
    ps = cp.socp
    n = ps.n_x
    A, b, cones = _clarabel_data(cp)
    P = sp.csc_matrix((n, n))
    solver = clarabel.DefaultSolver(P, ps.c, A, b, cones, _settings(solver_tol, max_iter))
    res = solver.solve()
    status = str(res.status)
    if "Infeasible" in status and "Almost" not in status:
        if "Dual" in status:
            raise OpfUnbounded(f"OPF unbounded ({status})")
        raise OpfInfeasible(f"OPF infeasible ({status})")
    if "MaxIterations" in status or "MaxTime" in status:
        raise OpfMaxIterations(f"OPF solver stopped: {status}")
    if "Solved" not in status:
        raise OpfSolveError(f"OPF solver failed: {status}")

    x = np.array(res.x)
    z = np.array(res.z)
    n_eq, n_in = ps.A_e.shape[0], ps.A_i.shape[0]
    lam = z[:n_eq]
    mu = np.maximum(z[n_eq:n_eq + n_in], 0.0)
    nu = np.empty(ps.K)
    pos = n_eq + n_in
    for m, cn in enumerate(ps.cones):
        nu[m] = max(z[pos], 0.0)
        pos += 1 + cn.A.shape[0]

    sol = PrimalDualSolution(x, lam, mu, nu, 0.0, "optimal", iterations=int(res.iterations))
    sol.residuals = kkt_residuals(cp, x, lam, mu, nu)
    if polish:
        polished = polish_solution(cp, sol)
        if polished is not None and polished.kkt_residual <= sol.kkt_residual:
            sol = polished
    sol.objective = float(ps.c @ sol.x + ps.offset @ cp.theta)
    if sol.kkt_residual > kkt_tol:
        sol.status = "optimal_inaccurate"
        log.warning("KKT residual %.2e exceeds tolerance %.1e", sol.kkt_residual, kkt_tol)
    return sol


def _local_cones(ps: ParametricSocp):
    """Per-cone (cols, A restricted to cols, b restricted to cols) triples."""
    out = []
    for cn in ps.cones:
        cols = cn.cols
        out.append((cols, cn.A[:, cols], cn.b[cols]))
    return out


def _newton_active(cp: ConeProgram, sol: PrimalDualSolution, act_i: np.ndarray, act_c: list[int],
                   local, max_steps: int, tol: float):
    """Newton iterations on the KKT equations with a fixed active set."""
    ps = cp.socp
    n = ps.n_x
    n_eq = ps.A_e.shape[0]
    x = sol.x.copy()
    Ai = ps.A_i[act_i]
    bi = cp.b_i[act_i]
    na, nc = len(act_i), len(act_c)
    lam = sol.lam.copy()
    mu_a = sol.mu[act_i].copy()
    nu_a = sol.nu[act_c].copy()
    Ae_s = sp.csr_matrix(ps.A_e)
    Ai_s = sp.csr_matrix(Ai)

    def residual(x, lam, mu_a, nu_a):
        G = np.zeros((n, nc))
        h = np.empty(nc)
        for j, m in enumerate(act_c):
            cols, A, b = local[m]
            Ax = A @ x[cols]
            nrm = np.linalg.norm(Ax)
            G[cols, j] = A.T @ Ax / nrm - b
            h[j] = nrm - b @ x[cols] - ps.cones[m].f
        g = ps.c + Ae_s.T @ lam + Ai_s.T @ mu_a + G @ nu_a
        return np.concatenate([g, Ae_s @ x - cp.b_e, Ai_s @ x - bi, h]), G

    F, G = residual(x, lam, mu_a, nu_a)
    for _ in range(max_steps):
        if np.max(np.abs(F)) <= tol:
            break
        rows, cols_, vals = [], [], []
        for j, m in enumerate(act_c):
            cols, A, _ = local[m]
            Ax = A @ x[cols]
            nrm = np.linalg.norm(Ax)
            AtAx = A.T @ Ax
            Hm = nu_a[j] * (A.T @ A / nrm - np.outer(AtAx, AtAx) / nrm ** 3)
            rr, cc = np.meshgrid(cols, cols, indexing="ij")
            rows.append(rr.ravel())
            cols_.append(cc.ravel())
            vals.append(Hm.ravel())
        H = sp.csr_matrix((np.concatenate(vals) if vals else [],
                           (np.concatenate(rows) if rows else [], np.concatenate(cols_) if cols_ else [])),
                          shape=(n, n))
        Gs = sp.csr_matrix(G)
        J = sp.bmat([[H, Ae_s.T, Ai_s.T, Gs],
                     [Ae_s, None, None, None],
                     [Ai_s, None, None, None],
                     [Gs.T, None, None, None]], format="csc")
        dim = J.shape[0]
        try:
            step = spla.splu(J).solve(-F)
            if not np.all(np.isfinite(step)):
                raise RuntimeError
        except RuntimeError:
            step = np.linalg.lstsq(J.toarray(), -F, rcond=None)[0]
        x = x + step[:n]
        lam = lam + step[n:n + n_eq]
        mu_a = mu_a + step[n + n_eq:n + n_eq + na]
        nu_a = nu_a + step[n + n_eq + na:dim]
        F, G = residual(x, lam, mu_a, nu_a)
        if not np.all(np.isfinite(F)):
            return None
    mu = np.zeros(ps.A_i.shape[0])
    mu[act_i] = mu_a
    nu = np.zeros(ps.K)
    nu[act_c] = nu_a
    return x, lam, mu, nu


def polish_solution(cp: ConeProgram, sol: PrimalDualSolution, max_steps: int = 8,
                    tol: float = 1e-14, max_rounds: int = 4) -> PrimalDualSolution | None:
    """Newton refinement of the KKT equations restricted to the active set.

    The active set is guessed from the interior-point iterate (dual larger than
    slack). If the refined point violates an inactive constraint, that
    constraint is added; if a multiplier turns negative, its constraint is
    dropped. Returns None when no consistent active set is found.
    """
    ps = cp.socp
    slack = cp.b_i - ps.A_i @ sol.x
    norms, gaps = _cone_terms(ps, sol.x)
    act_i = set(np.flatnonzero(sol.mu > slack).tolist())
    act_c = {m for m in range(ps.K) if sol.nu[m] > gaps[m] and norms[m] > 1e-9}
    local = _local_cones(ps)
    feas_tol = 1e-13
    for _ in range(max_rounds):
        out = _newton_active(cp, sol, np.array(sorted(act_i), dtype=int), sorted(act_c), local, max_steps, tol)
        if out is None:
            return None
        x, lam, mu, nu = out
        slack = cp.b_i - ps.A_i @ x
        norms, gaps = _cone_terms(ps, x)
        neg_i = {i for i in act_i if mu[i] < 0}
        neg_c = {m for m in act_c if nu[m] < 0}
        viol_i = {int(i) for i in np.flatnonzero(slack < -feas_tol)} - act_i
        viol_c = {m for m in range(ps.K) if gaps[m] < -feas_tol and norms[m] > 1e-9} - act_c
        if not (neg_i or neg_c or viol_i or viol_c):
            res = PrimalDualSolution(x, lam, mu, nu, 0.0, "optimal", polished=True, iterations=sol.iterations)
            res.residuals = kkt_residuals(cp, x, lam, mu, nu)
            return res
        act_i = (act_i - neg_i) | viol_i
        act_c = (act_c - neg_c) | viol_c
    return None


# -- exactness ---------------------------------------------------------------------


@dataclass
class ExactnessReport:
    gaps: np.ndarray  # (ell + v_pi) - ||[2P; 2Q; v_pi - ell]||, relaxation cones only
    rel_gaps: np.ndarray
    max_rel_gap: float
    exact: bool


def check_exactness(f: FeederModel, sol: PrimalDualSolution | np.ndarray,
                    exact_tol: float = EXACT_TOL) -> ExactnessReport:
    x = sol.x if isinstance(sol, PrimalDualSolution) else np.asarray(sol)
    L = Layout(f.N, f.Ng)
    P, Q, ell = x[L.P], x[L.Q], x[L.ell]
    vpar = np.array([x[L.vbus(int(p))] for p in f.parent])
    scale = ell + vpar
    gaps = scale - np.sqrt((2 * P) ** 2 + (2 * Q) ** 2 + (vpar - ell) ** 2)
    rel = gaps / np.maximum(np.abs(scale), 1e-300)
    mx = float(np.max(np.abs(rel)))
    return ExactnessReport(gaps, rel, mx, mx <= exact_tol)


# -- records -----------------------------------------------------------------------


@dataclass(eq=False)
class OpfRecord:
    theta: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    objective: float
    exact_gap_max: float
    status: str
    jac: np.ndarray | None = None
    jac_exists: bool | None = None
    t: int | None = None

    def to_json(self) -> str:
        d = {
            "theta": self.theta.tolist(), "x": self.x.tolist(), "lambda": self.lam.tolist(),
            "mu": self.mu.tolist(), "nu": self.nu.tolist(), "objective": self.objective,
            "exact_gap_max": self.exact_gap_max, "status": self.status,
        }
        if self.t is not None:
            d["t"] = int(self.t)
        if self.jac_exists is not None:
            d["jac_exists"] = bool(self.jac_exists)
            d["jac"] = self.jac.reshape(-1).tolist() if self.jac is not None else None
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "OpfRecord":
        d = json.loads(line)
        theta = np.array(d["theta"])
        x = np.array(d["x"])
        jac = d.get("jac")
        if jac is not None:
            jac = np.array(jac).reshape(len(x), len(theta))
        return cls(theta, x, np.array(d["lambda"]), np.array(d["mu"]), np.array(d["nu"]),
                   float(d["objective"]), float(d["exact_gap_max"]), d["status"], jac,
                   d.get("jac_exists"), d.get("t"))


def make_record(cp: ConeProgram, sol: PrimalDualSolution, t: int | None = None) -> OpfRecord:
    gap = check_exactness(cp.socp.feeder, sol).max_rel_gap
    return OpfRecord(cp.theta.copy(), sol.x.copy(), sol.lam.copy(), sol.mu.copy(), sol.nu.copy(),
                     sol.objective, gap, sol.status, t=t)


def write_records(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[OpfRecord]:
    with open(path) as fh:
        return [OpfRecord.from_json(line) for line in fh if line.strip()]
