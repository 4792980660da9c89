from __future__ import annotations

import numpy as np
import pytest

from gpopf.feeder import ScenarioConfig, gen_scenarios
from gpopf.socp_opf import (OpfInfeasible, OpfRecord, build_socp, check_exactness, instantiate, kkt_residuals,
                            make_record, read_records, solve, write_records)

from conftest import make_feeder


@pytest.fixture(scope="module")
def day13(f13):
    return gen_scenarios(f13, ScenarioConfig(interval_min=60), seed=0)


def test_dimensions(f13):
    ps = build_socp(f13)
    N, Ng = f13.N, f13.Ng
    assert ps.n_x == 2 * Ng + 4 * N + 1
    assert ps.A_e.shape == (3 * N + 1, ps.n_x)  # v0 fixed adds one row
    assert ps.A_i.shape == (3 * N + 2 * Ng, ps.n_x)
    assert ps.K == N + Ng
    assert ps.B_e.shape[1] == ps.B_i.shape[1] == f13.M


def test_single_line_closed_form():
    # one line, no inverter: the relaxation is tight and DistFlow fixes everything
    r, x, p, q = 0.02, 0.04, 0.5, 0.2
    f = make_feeder([0], [r], [x])
    ps = build_socp(f)
    sol = solve(instantiate(ps, [p, q]))
    ell = 0.0
    for _ in range(200):
        P, Q = p + r * ell, q + x * ell
        ell = P ** 2 + Q ** 2
    L = ps.layout
    assert sol.x[L.P][0] == pytest.approx(P, abs=1e-9)
    assert sol.x[L.Q][0] == pytest.approx(Q, abs=1e-9)
    assert sol.x[L.ell][0] == pytest.approx(ell, abs=1e-9)
    v1 = 1 - 2 * (r * P + x * Q) + (r ** 2 + x ** 2) * ell
    assert sol.x[L.v][0] == pytest.approx(v1, abs=1e-9)
    assert sol.objective == pytest.approx(p + r * ell, abs=1e-9)


def test_kkt_and_exactness(f13, day13):
    ps = build_socp(f13)
    for g in day13.conditions[::2]:
        cp = instantiate(ps, g)
        sol = solve(cp)
        assert sol.kkt_residual <= 1e-8
        assert sol.status == "optimal"
        assert check_exactness(f13, sol).exact
        assert kkt_residuals(cp, sol.x, sol.lam, sol.mu, sol.nu)["dual_feas"] == 0.0


def test_matches_independent_model(f13, day13):
    cvx = pytest.importorskip("cvxpy")
    g = day13.conditions[6]
    sol = solve(instantiate(build_socp(f13), g))
    N, Ng = f13.N, f13.Ng
    pg, qg = cvx.Variable(Ng), cvx.Variable(Ng)
    P, Q, ell = cvx.Variable(N), cvx.Variable(N), cvx.Variable(N)
    v = cvx.Variable(N + 1)
    E = np.zeros((N, Ng))
    E[f13.inverter_buses - 1, np.arange(Ng)] = 1
    C = np.zeros((N + 1, N))  # C[k, n-1] = 1 if bus n is a child of k
    for n in range(1, N + 1):
        C[f13.parent[n - 1], n - 1] = 1
    vpar = cvx.hstack([v[int(k)] for k in f13.parent])
    cons = [
        v[0] == 1.0,
        E @ pg - g.p_load == C[1:] @ P - (P - cvx.multiply(f13.r, ell)),
        E @ qg - g.q_load == C[1:] @ Q - (Q - cvx.multiply(f13.x, ell)),
        v[1:] == vpar + cvx.multiply(f13.r ** 2 + f13.x ** 2, ell) - 2 * (cvx.multiply(f13.r, P) + cvx.multiply(f13.x, Q)),
        ell <= f13.lbar, v[1:] <= f13.vmax, v[1:] >= f13.vmin, pg >= 0, pg <= g.pg_cap,
    ]
    for n in range(N):
        cons.append(cvx.SOC(ell[n] + vpar[n], cvx.hstack([2 * P[n], 2 * Q[n], vpar[n] - ell[n]])))
    for j in range(Ng):
        cons.append(cvx.SOC(cvx.Constant(f13.sbar[j]), cvx.hstack([pg[j], qg[j]])))
    prob = cvx.Problem(cvx.Minimize(cvx.sum(g.p_load) - cvx.sum(pg) + f13.r @ ell), cons)
    prob.solve(solver="CVXOPT")
    L = build_socp(f13).layout
    assert sol.objective == pytest.approx(prob.value, abs=1e-7)
    np.testing.assert_allclose(sol.x[L.qg], qg.value, atol=1e-5)
    np.testing.assert_allclose(sol.x[L.v], v.value[1:], atol=1e-6)


def test_infeasible():
    f = make_feeder([0], [0.05], [0.05], vmin=0.99 ** 2, vmax=1.01 ** 2)
    with pytest.raises(OpfInfeasible):
        solve(instantiate(build_socp(f), [3.0, 1.0]))


def test_theta_length_checked(f13):
    with pytest.raises(ValueError):
        instantiate(build_socp(f13), np.zeros(f13.M + 1))


def test_records_roundtrip(tmp_path, f13, day13):
    ps = build_socp(f13)
    recs = []
    for i, g in enumerate(day13.conditions[:3]):
        cp = instantiate(ps, g)
        recs.append(make_record(cp, solve(cp), t=i))
    recs[0].jac = np.arange(ps.n_x * f13.M, dtype=float).reshape(ps.n_x, f13.M)
    recs[0].jac_exists = True
    p = tmp_path / "r.jsonl"
    write_records(recs, p)
    back = read_records(p)
    assert len(back) == 3
    np.testing.assert_array_equal(back[0].jac, recs[0].jac)
    np.testing.assert_array_equal(back[2].x, recs[2].x)
    assert back[1].jac is None and back[1].t == 1
    assert OpfRecord.from_json(recs[2].to_json()).objective == recs[2].objective


def test_solar_lowers_substation_draw(f13, day13):
    ps = build_socp(f13)
    g = day13.conditions[6]
    th = g.theta.copy()
    a = solve(instantiate(ps, th)).objective
    th[2 * f13.N:] = 0.0
    b = solve(instantiate(ps, th)).objective
    assert a < b
