from __future__ import annotations

import numpy as np
import pytest

from gpopf.feeder import bundled_feeder, feeder_from_dict

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_feeder(parents, r, x, inverters=(), sbar=None, vmin=0.9 ** 2, vmax=1.1 ** 2, lbar=100.0, v0=1.0,
                pload=None, name="test"):
    """Feeder from parent ids (bus k has parent parents[k-1]); bus ids are 1..N."""
    N = len(parents)
    sbar = [1.0] * len(inverters) if sbar is None else sbar
    pload = [0.0] * N if pload is None else pload
    d = {
        "name": name,
        "v0_mode": "fixed" if v0 is not None else "variable",
        "buses": [{"id": k, "vmin": vmin, "vmax": vmax, "pload": pload[k - 1]} for k in range(1, N + 1)],
        "lines": [{"bus": k, "parent": parents[k - 1], "r": r[k - 1], "x": x[k - 1], "lbar": lbar}
                  for k in range(1, N + 1)],
        "inverters": [{"bus": b, "sbar": s} for b, s in zip(inverters, sbar)],
    }
    if v0 is not None:
        d["v0"] = v0
    return feeder_from_dict(d)


def random_radial(N: int, seed: int, n_inv: int = 2, **kw):
    rng = np.random.default_rng(seed)
    parents = [0] + [int(rng.integers(0, k)) for k in range(2, N + 1)]
    r = rng.uniform(0.002, 0.01, N)
    x = rng.uniform(0.002, 0.01, N)
    inv = sorted(rng.choice(np.arange(1, N + 1), size=min(n_inv, N), replace=False).tolist())
    return make_feeder(parents, r, x, inv, **kw)


@pytest.fixture(scope="session")
def f13():
    return bundled_feeder("feeder13")


@pytest.fixture(scope="session")
def f123():
    return bundled_feeder("feeder123")
