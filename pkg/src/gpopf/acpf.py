"""Backward/forward sweep DistFlow power flow for radial feeders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederModel


class PowerFlowError(RuntimeError):
    pass


class NonConvergence(PowerFlowError):
    pass


class VoltageCollapse(PowerFlowError):
    pass


@dataclass
class PfState:
    v: np.ndarray  # squared voltages, bus 0..N
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    residual: float
    iterations: int


def distflow_residuals(f: FeederModel, p_net, q_net, v, P, Q, ell) -> dict[str, float]:
    """Max absolute violation of each DistFlow equation family."""
    N = f.N
    par = f.parent
    childP = np.zeros(N + 1)
    childQ = np.zeros(N + 1)
    np.add.at(childP, par, P)
    np.add.at(childQ, par, Q)
    rp = childP[1:] - (P - f.r * ell) - p_net
    rq = childQ[1:] - (Q - f.x * ell) - q_net
    rv = v[1:] - v[par] - (f.r ** 2 + f.x ** 2) * ell + 2 * (f.r * P + f.x * Q)
    rl = ell * v[par] - (P ** 2 + Q ** 2)
    return {"p": float(np.max(np.abs(rp))), "q": float(np.max(np.abs(rq))),
            "v": float(np.max(np.abs(rv))), "ell": float(np.max(np.abs(rl)))}


def solve_pf(f: FeederModel, p_net, q_net, v0: float = 1.0, tol: float = 1e-10,
             max_iter: int = 100) -> PfState:
    """Solve the exact DistFlow equations for net injections ``p_net``, ``q_net``.

    Convergence is declared when the largest residual over all four equation
    families drops to ``tol``.
    """
    if v0 <= 0:
        raise ValueError("v0 must be positive")
    p_net = np.asarray(p_net, dtype=float)
    q_net = np.asarray(q_net, dtype=float)
    N = f.N
    if p_net.shape != (N,) or q_net.shape != (N,):
        raise ValueError(f"injections must have length {N}")
    par = f.parent
    r, x = f.r, f.x
    z2 = r ** 2 + x ** 2
    v = np.full(N + 1, float(v0))
    ell = np.zeros(N)
    P = np.zeros(N)
    Q = np.zeros(N)
    res = np.inf
    prev = np.inf
    growth = 0
    for it in range(1, max_iter + 1):
        # backward: leaves to root
        accP = np.zeros(N + 1)
        accQ = np.zeros(N + 1)
        for n in range(N, 0, -1):
            P[n - 1] = accP[n] + r[n - 1] * ell[n - 1] - p_net[n - 1]
            Q[n - 1] = accQ[n] + x[n - 1] * ell[n - 1] - q_net[n - 1]
            accP[par[n - 1]] += P[n - 1]
            accQ[par[n - 1]] += Q[n - 1]
        # forward: root to leaves
        for n in range(1, N + 1):
            v[n] = v[par[n - 1]] + z2[n - 1] * ell[n - 1] - 2 * (r[n - 1] * P[n - 1] + x[n - 1] * Q[n - 1])
            if v[n] <= 0:
                raise VoltageCollapse(f"non-positive squared voltage at bus {f.bus_ids[n]}")
        ell = (P ** 2 + Q ** 2) / v[par]
        res = max(distflow_residuals(f, p_net, q_net, v, P, Q, ell).values())
        if res <= tol:
            return PfState(v, P.copy(), Q.copy(), ell, res, it)
        if not np.isfinite(res):
            break
        growth = growth + 1 if res > prev else 0
        if growth >= 5:
            break
        prev = res
    raise NonConvergence(f"sweep did not converge (residual {res:.3e})")


def net_injections(f: FeederModel, theta, pg, qg) -> tuple[np.ndarray, np.ndarray]:
    """Net bus injections p = p^g - p^l, q = q^g - q^l for inverter setpoints."""
    N = f.N
    theta = np.asarray(theta, dtype=float)
    p = -theta[:N].copy()
    q = -theta[N:2 * N].copy()
    idx = f.inverter_buses - 1
    p[idx] += np.asarray(pg, dtype=float)
    q[idx] += np.asarray(qg, dtype=float)
    return p, q


@dataclass
class LimitReport:
    deviation: np.ndarray  # |sqrt(v_n) - 1|, buses 1..N
    voltage_violations: int
    worst_deviation: float
    worst_bus: int
    current_violations: int
    worst_current_ratio: float

    @property
    def ok(self) -> bool:
        return self.voltage_violations == 0 and self.current_violations == 0


def check_limits(state: PfState, f: FeederModel, band: float = 0.03) -> LimitReport:
    dev = np.abs(np.sqrt(state.v[1:]) - 1.0)
    viol = dev > band
    ratio = state.ell / f.lbar
    worst = int(np.argmax(dev))
    return LimitReport(
        deviation=dev,
        voltage_violations=int(viol.sum()),
        worst_deviation=float(dev[worst]),
        worst_bus=int(f.bus_ids[worst + 1]),
        current_violations=int(np.sum(ratio > 1.0)),
        worst_current_ratio=float(ratio.max()),
    )
