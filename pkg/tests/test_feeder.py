from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpopf.feeder import (FeederError, ScenarioConfig, feeder_from_dict, gen_scenarios, load_feeder, median_filter,
                          pack_theta, read_scenarios_csv, save_feeder, unpack_theta, write_scenarios_csv)

from conftest import make_feeder


def test_bundled_sizes(f13, f123):
    assert (f13.N, f13.Ng, f13.M) == (13, 3, 29)
    assert (f123.N, f123.Ng) == (123, 17)
    assert f13.M == 2 * f13.N + f13.Ng


def test_breadth_first_renumbering():
    # ids out of order: 7 feeds 3 feeds 9
    d = {
        "buses": [{"id": i, "vmin": 0.9, "vmax": 1.1} for i in (3, 7, 9)],
        "lines": [{"bus": 9, "parent": 3, "r": 0.01, "x": 0.01, "lbar": 1.0},
                  {"bus": 3, "parent": 7, "r": 0.02, "x": 0.01, "lbar": 1.0},
                  {"bus": 7, "parent": 0, "r": 0.03, "x": 0.01, "lbar": 1.0}],
        "inverters": [{"bus": 9, "sbar": 0.5}],
    }
    f = feeder_from_dict(d)
    assert f.bus_ids.tolist() == [0, 7, 3, 9]
    assert f.parent.tolist() == [0, 1, 2]
    assert f.r.tolist() == [0.03, 0.02, 0.01]
    assert f.inverter_buses.tolist() == [3]
    assert f.path(3) == [3, 2, 1]
    assert f.internal_bus(9) == 3


@pytest.mark.parametrize("lines", [
    # two parent lines for bus 2
    [{"bus": 1, "parent": 0}, {"bus": 2, "parent": 1}, {"bus": 2, "parent": 0}],
    # cycle 1 -> 2 -> 1, detached from the substation
    [{"bus": 1, "parent": 2}, {"bus": 2, "parent": 1}],
    # bus without a feeding line
    [{"bus": 1, "parent": 0}],
    # unknown parent
    [{"bus": 1, "parent": 0}, {"bus": 2, "parent": 5}],
])
def test_non_radial_rejected(lines):
    for ln in lines:
        ln.update(r=0.01, x=0.01, lbar=1.0)
    d = {"buses": [{"id": 1, "vmin": 0.9, "vmax": 1.1}, {"id": 2, "vmin": 0.9, "vmax": 1.1}], "lines": lines}
    with pytest.raises(FeederError):
        feeder_from_dict(d)


def test_invalid_parameters_rejected():
    with pytest.raises(FeederError):
        make_feeder([0], [-0.1], [0.1])
    with pytest.raises(FeederError):
        make_feeder([0], [0.1], [0.1], vmin=1.2, vmax=1.1)
    with pytest.raises(FeederError):
        make_feeder([0], [0.1], [0.1], inverters=[1], sbar=[0.0])


def test_roundtrip(tmp_path, f13):
    p = tmp_path / "f.json"
    save_feeder(f13, p)
    g = load_feeder(p)
    assert g.fingerprint() == f13.fingerprint()
    np.testing.assert_array_equal(g.parent, f13.parent)
    assert g.v0_fixed == f13.v0_fixed


def test_theta_packing(f13):
    rng = np.random.default_rng(0)
    th = rng.uniform(0, 1, f13.M)
    g = unpack_theta(f13, th)
    np.testing.assert_array_equal(g.theta, th)
    with pytest.raises(ValueError):
        unpack_theta(f13, th[:-1])
    with pytest.raises(ValueError):
        pack_theta(f13, th[:13], th[13:26], -th[26:])


def test_median_filter():
    s = np.array([0.0, 10.0, 0.0, 0.0, 5.0])
    np.testing.assert_array_equal(median_filter(s, 1), s)
    assert median_filter(s, 3).tolist() == [5.0, 0.0, 0.0, 0.0, 2.5]
    # even order rounds up
    np.testing.assert_array_equal(median_filter(s, 2), median_filter(s, 3))


def test_scenarios_deterministic(f13):
    a = gen_scenarios(f13, seed=3)
    b = gen_scenarios(f13, seed=3)
    c = gen_scenarios(f13, seed=4)
    np.testing.assert_array_equal(a.thetas(), b.thetas())
    assert not np.array_equal(a.thetas(), c.thetas())
    assert len(a) == 781 and a.times[0] == 420 and a.times[-1] == 1200
    th = a.thetas()
    assert np.all(th[:, 2 * f13.N:] >= 0)
    # reactive loads follow lagging power factors in [0.9, 1]
    ratio = th[:, f13.N:2 * f13.N] / np.maximum(th[:, :f13.N], 1e-12)
    assert ratio.max() <= np.tan(np.arccos(0.9)) + 1e-12


def test_scenario_config_validation(f13):
    with pytest.raises(ValueError):
        gen_scenarios(f13, ScenarioConfig(start_min=600, end_min=500))
    with pytest.raises(ValueError):
        gen_scenarios(f13, ScenarioConfig(pf_range=(0.0, 1.0)))


def test_scenario_csv_roundtrip(tmp_path, f13):
    ss = gen_scenarios(f13, ScenarioConfig(interval_min=120), seed=1)
    p = tmp_path / "s.csv"
    write_scenarios_csv(f13, ss, p)
    back = read_scenarios_csv(f13, p)
    np.testing.assert_array_equal(back.times, ss.times)
    np.testing.assert_array_equal(back.thetas(), ss.thetas())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=1000), min_size=1, max_size=25), st.randoms())
def test_renumbering_property(raw, rnd):
    # random tree over shuffled ids: every parent precedes its child internally
    N = len(raw)
    ids = rnd.sample(range(1, 10 * N + 1), N)
    parents = [0] + [ids[rnd.randrange(k)] for k in range(1, N)]
    d = {"buses": [{"id": i, "vmin": 0.9, "vmax": 1.1} for i in ids],
         "lines": [{"bus": ids[k], "parent": parents[k], "r": 0.01, "x": 0.01, "lbar": 1.0} for k in range(N)]}
    f = feeder_from_dict(d)
    assert np.all(f.parent < np.arange(1, N + 1))
    for k in range(N):
        n = f.internal_bus(ids[k])
        assert f.bus_ids[f.parent[n - 1]] == parents[k]
