"""Regenerate the bundled synthetic feeders in src/gpopf/data/."""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "gpopf" / "data"
VMIN, VMAX = 0.95 ** 2, 1.05 ** 2
OVERSIZE = 1.1


def feeder13():
    parents = {1: 0, 2: 1, 3: 2, 4: 3, 5: 2, 6: 5, 7: 6, 8: 5, 9: 8, 10: 8, 11: 10, 12: 10, 13: 12}
    rng = np.random.default_rng(13)
    pload = {1: 0.0, 2: 0.06, 3: 0.05, 4: 0.04, 5: 0.08, 6: 0.05, 7: 0.06, 8: 0.03,
             9: 0.07, 10: 0.05, 11: 0.06, 12: 0.09, 13: 0.07}
    inverters = [2, 5, 12]
    penetration = 0.5
    lines = []
    for b, p in parents.items():
        r = float(np.round(rng.uniform(0.0039, 0.0091), 5))
        lines.append({"bus": b, "parent": p, "r": r, "x": float(np.round(r * rng.uniform(1.2, 2.0), 5)),
                      "lbar": 4.0})
    return {
        "name": "feeder13",
        "v0_mode": "fixed",
        "v0": 1.0,
        "buses": [{"id": b, "vmin": VMIN, "vmax": VMAX, "pload": pload[b]} for b in parents],
        "lines": lines,
        "inverters": [{"bus": b, "sbar": round(OVERSIZE * penetration * pload[b], 6)} for b in inverters],
    }


def feeder123():
    rng = np.random.default_rng(123)
    N = 123
    parents = {}
    trunk = [0]
    for b in range(1, N + 1):
        if b <= 25 or rng.uniform() < 0.35:
            p = b - 1  # extend the current branch
        else:
            p = int(rng.integers(max(0, b - 30), b))
        parents[b] = p
    pload = {b: (0.0 if rng.uniform() < 0.2 else float(np.round(rng.uniform(0.004, 0.016), 5)))
             for b in parents}
    inverters = [b for b in range(5, 90, 5)]
    for b in inverters:
        if pload[b] == 0.0:
            pload[b] = float(np.round(rng.uniform(0.006, 0.016), 5))
    penetration = 0.5
    lines = []
    for b, p in parents.items():
        r = float(np.round(rng.uniform(0.0015, 0.0035), 6))
        lines.append({"bus": b, "parent": p, "r": r, "x": float(np.round(r * rng.uniform(1.2, 2.0), 6)),
                      "lbar": 4.0})
    return {
        "name": "feeder123",
        "v0_mode": "fixed",
        "v0": 1.0,
        "buses": [{"id": b, "vmin": VMIN, "vmax": VMAX, "pload": pload[b]} for b in parents],
        "lines": lines,
        "inverters": [{"bus": b, "sbar": round(OVERSIZE * penetration * pload[b], 6)} for b in inverters],
    }


if __name__ == "__main__":
    for name, fn in (("feeder13", feeder13), ("feeder123", feeder123)):
        (OUT / f"{name}.json").write_text(json.dumps(fn(), indent=1))
        print("wrote", OUT / f"{name}.json")
