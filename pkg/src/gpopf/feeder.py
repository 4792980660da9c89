"""Radial feeder model, grid-condition vectors and synthetic scenario generation.

Buses are numbered 1..N internally with the substation at 0. Input files may
use arbitrary integer ids; they are renumbered breadth-first so that every
parent index is smaller than its child index.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, asdict
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np


class FeederError(ValueError):
    """Raised for malformed or non-radial feeder descriptions."""


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Static single-phase radial feeder.

    All arrays are indexed by internal bus number minus one (line n feeds bus n).
    ``vmin``/``vmax`` and ``lbar`` are squared quantities (pu^2).
    """

    name: str
    parent: np.ndarray  # parent[n-1] = pi_n, in 0..n-1
    r: np.ndarray
    x: np.ndarray
    lbar: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    inverter_buses: np.ndarray  # internal numbers, ascending
    sbar: np.ndarray
    v0_fixed: float | None = None
    bus_ids: np.ndarray | None = None  # original id of internal bus n at [n]
    p_nominal: np.ndarray | None = None  # nominal peak active load per bus (pu)

    def __post_init__(self):
        for name in ("parent", "r", "x", "lbar", "vmin", "vmax", "inverter_buses", "sbar"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.bus_ids is None:
            object.__setattr__(self, "bus_ids", np.arange(self.N + 1))
        if self.p_nominal is None:
            object.__setattr__(self, "p_nominal", np.zeros(self.N))
        _validate(self)
        children: list[list[int]] = [[] for _ in range(self.N + 1)]
        for n in range(1, self.N + 1):
            children[self.parent[n - 1]].append(n)
        object.__setattr__(self, "_children", tuple(tuple(c) for c in children))

    @property
    def N(self) -> int:
        return len(self.parent)

    @property
    def Ng(self) -> int:
        return len(self.inverter_buses)

    @property
    def M(self) -> int:
        return 2 * self.N + self.Ng

    @property
    def v0_mode(self) -> str:
        return "variable" if self.v0_fixed is None else "fixed"

    def children(self, n: int) -> tuple[int, ...]:
        return self._children[n]

    def path(self, n: int) -> list[int]:
        """Buses on the path from ``n`` up to (excluding) the substation."""
        out = []
        while n != 0:
            out.append(n)
            n = int(self.parent[n - 1])
        return out

    def internal_bus(self, bus_id: int) -> int:
        hits = np.flatnonzero(self.bus_ids == bus_id)
        if len(hits) == 0:
            raise KeyError(f"unknown bus id {bus_id}")
        return int(hits[0])

    def inverter_index(self, bus_id: int) -> int:
        """Position of the inverter at original bus ``bus_id`` within the inverter list."""
        n = self.internal_bus(bus_id)
        hits = np.flatnonzero(self.inverter_buses == n)
        if len(hits) == 0:
            raise KeyError(f"bus {bus_id} hosts no inverter")
        return int(hits[0])

    def with_v0(self, v0: float | None) -> "FeederModel":
        return _replace(self, v0_fixed=v0)

    def with_sbar(self, sbar) -> "FeederModel":
        return _replace(self, sbar=np.asarray(sbar, dtype=float))

    def to_dict(self) -> dict:
        ids = self.bus_ids
        return {
            "name": self.name,
            "v0_mode": self.v0_mode,
            **({"v0": self.v0_fixed} if self.v0_fixed is not None else {}),
            "buses": [
                {"id": int(ids[n]), "vmin": float(self.vmin[n - 1]), "vmax": float(self.vmax[n - 1]),
                 "pload": float(self.p_nominal[n - 1])}
                for n in range(1, self.N + 1)
            ],
            "lines": [
                {"bus": int(ids[n]), "parent": int(ids[self.parent[n - 1]]), "r": float(self.r[n - 1]),
                 "x": float(self.x[n - 1]), "lbar": float(self.lbar[n - 1])}
                for n in range(1, self.N + 1)
            ],
            "inverters": [
                {"bus": int(ids[n]), "sbar": float(s)} for n, s in zip(self.inverter_buses, self.sbar)
            ],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _replace(f: FeederModel, **changes) -> FeederModel:
    kw = {k: getattr(f, k) for k in (
        "name", "parent", "r", "x", "lbar", "vmin", "vmax", "inverter_buses", "sbar",
        "v0_fixed", "bus_ids", "p_nominal")}
    kw.update(changes)
    return FeederModel(**kw)


def _validate(f: FeederModel) -> None:
    N = f.N
    if N < 1:
        raise FeederError("feeder needs at least one bus")
    for arr, name in ((f.r, "r"), (f.x, "x"), (f.lbar, "lbar"), (f.vmin, "vmin"), (f.vmax, "vmax")):
        if arr.shape != (N,):
            raise FeederError(f"{name} must have length {N}")
    if np.any(f.parent < 0) or np.any(f.parent >= np.arange(1, N + 1)):
        raise FeederError("parent indices must satisfy 0 <= parent[n] < n")
    if np.any(f.r <= 0):
        raise FeederError("line resistance must be positive")
    if np.any(f.lbar <= 0):
        raise FeederError("line ampacity must be positive")
    if np.any(f.vmin <= 0) or np.any(f.vmin >= f.vmax):
        raise FeederError("voltage bounds must satisfy 0 < vmin < vmax")
    if f.sbar.shape != f.inverter_buses.shape:
        raise FeederError("one rating per inverter required")
    if len(set(f.inverter_buses.tolist())) != len(f.inverter_buses):
        raise FeederError("duplicate inverter bus")
    if np.any(np.diff(f.inverter_buses) <= 0):
        raise FeederError("inverter buses must be ascending")
    if np.any(f.inverter_buses < 1) or np.any(f.inverter_buses > N):
        raise FeederError("inverter bus out of range")
    if np.any(f.sbar <= 0):
        raise FeederError("inverter rating must be positive")
    if f.v0_fixed is not None and f.v0_fixed <= 0:
        raise FeederError("fixed v0 must be positive")


def feeder_from_dict(d: dict) -> FeederModel:
    """Build a validated FeederModel from the JSON feeder schema."""
    try:
        buses = {int(b["id"]): b for b in d["buses"]}
        lines = d["lines"]
        inverters = d.get("inverters", [])
    except (KeyError, TypeError) as exc:
        raise FeederError(f"malformed feeder description: {exc}") from exc
    if 0 in buses:
        raise FeederError("bus id 0 is reserved for the substation")
    parent_of: dict[int, dict] = {}
    for ln in lines:
        b = int(ln["bus"])
        if b in parent_of:
            raise FeederError(f"bus {b} has more than one parent line: not a tree")
        if b not in buses:
            raise FeederError(f"line refers to unknown bus {b}")
        p = int(ln["parent"])
        if p != 0 and p not in buses:
            raise FeederError(f"line refers to unknown parent bus {p}")
        parent_of[b] = ln
    missing = set(buses) - set(parent_of)
    if missing:
        raise FeederError(f"buses without a feeding line: {sorted(missing)}")

    # breadth-first renumbering from the substation
    kids: dict[int, list[int]] = {}
    for b, ln in parent_of.items():
        kids.setdefault(int(ln["parent"]), []).append(b)
    order = [0]
    head = 0
    while head < len(order):
        for c in sorted(kids.get(order[head], [])):
            order.append(c)
        head += 1
    if len(order) != len(buses) + 1:
        raise FeederError("feeder is not a tree: some buses do not reach the substation")
    internal = {bid: i for i, bid in enumerate(order)}
    N = len(buses)
    ids = np.array(order)

    def col(key, src, default=None):
        vals = []
        for n in range(1, N + 1):
            item = src[ids[n]]
            if key not in item and default is None:
                raise FeederError(f"missing field {key!r} for bus {ids[n]}")
            vals.append(float(item.get(key, default)))
        return np.array(vals)

    parent = np.array([internal[int(parent_of[ids[n]]["parent"])] for n in range(1, N + 1)])
    inv = []
    for item in inverters:
        b = int(item["bus"])
        if b not in internal or b == 0:
            raise FeederError(f"inverter at unknown bus {b}")
        inv.append((internal[b], float(item["sbar"])))
    bus_nums = [n for n, _ in inv]
    if len(set(bus_nums)) != len(bus_nums):
        raise FeederError("duplicate inverter bus")
    inv.sort()
    mode = d.get("v0_mode", "variable")
    if isinstance(mode, dict):
        v0 = float(mode["fixed"])
    elif mode == "fixed":
        v0 = float(d.get("v0", 1.0))
    elif mode == "variable":
        v0 = None
    else:
        raise FeederError(f"unknown v0_mode {mode!r}")
    return FeederModel(
        name=str(d.get("name", "feeder")),
        parent=parent,
        r=col("r", parent_of),
        x=col("x", parent_of),
        lbar=col("lbar", parent_of),
        vmin=col("vmin", buses),
        vmax=col("vmax", buses),
        inverter_buses=np.array([n for n, _ in inv], dtype=int),
        sbar=np.array([s for _, s in inv]),
        v0_fixed=v0,
        bus_ids=ids,
        p_nominal=col("pload", buses, default=0.0),
    )


def load_feeder(path) -> FeederModel:
    """Read a JSON feeder file; raises FeederError on schema or topology problems."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FeederError(f"cannot parse {path}: {exc}") from exc
    return feeder_from_dict(d)


def save_feeder(f: FeederModel, path) -> None:
    Path(path).write_text(json.dumps(f.to_dict(), indent=1))


def bundled_feeder(name: str) -> FeederModel:
    """Load one of the packaged synthetic feeders: ``"feeder13"`` or ``"feeder123"``."""
    ref = resources.files("gpopf.data").joinpath(f"{name}.json")
    with resources.as_file(ref) as p:
        return load_feeder(p)


# -- grid conditions -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridConditions:
    p_load: np.ndarray
    q_load: np.ndarray
    pg_cap: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.p_load, self.q_load, self.pg_cap])


def pack_theta(f: FeederModel, p_load, q_load, pg_cap) -> GridConditions:
    p = np.asarray(p_load, dtype=float).reshape(-1)
    q = np.asarray(q_load, dtype=float).reshape(-1)
    c = np.asarray(pg_cap, dtype=float).reshape(-1)
    if p.shape != (f.N,) or q.shape != (f.N,):
        raise ValueError(f"load vectors must have length {f.N}")
    if c.shape != (f.Ng,):
        raise ValueError(f"solar caps must have length {f.Ng}")
    if np.any(c < 0):
        raise ValueError("solar caps must be nonnegative")
    return GridConditions(p.copy(), q.copy(), c.copy())


def unpack_theta(f: FeederModel, theta) -> GridConditions:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (f.M,):
        raise ValueError(f"theta must have length {f.M}, got {theta.shape}")
    N = f.N
    return pack_theta(f, theta[:N], theta[N:2 * N], theta[2 * N:])


# -- scenario generation -------------------------------------------------------------


def median_filter(series, order: int) -> np.ndarray:
    """Sliding median with windows truncated at the edges; even orders round up."""
    s = np.asarray(series, dtype=float)
    if s.size == 0:
        raise ValueError("empty series")
    if order < 1:
        raise ValueError("order must be >= 1")
    if order % 2 == 0:
        order += 1
    h = order // 2
    if h == 0:
        return s.copy()
    n = len(s)
    return np.array([np.median(s[max(0, i - h):min(n, i + h + 1)]) for i in range(n)])


@dataclass
class ScenarioConfig:
    """Daily profile settings. Times are minutes after midnight."""

    start_min: int = 420
    end_min: int = 1200
    interval_min: int = 1
    load_peaks: Sequence[float] | None = None  # per bus; defaults to the feeder's nominal loads
    solar_penetration: float = 0.5  # solar peak as a fraction of the bus peak load
    cloud_noise: float = 0.0
    load_noise: float = 0.02
    median_order: int | None = None
    pf_range: tuple[float, float] = (0.9, 1.0)
    sunrise_min: int = 330
    sunset_min: int = 1230
    load_scale: float = 1.0

    def validate(self, f: FeederModel) -> None:
        if self.interval_min < 1 or self.end_min < self.start_min:
            raise ValueError("invalid horizon")
        if not (0 <= self.start_min and self.end_min <= 2880):
            raise ValueError("horizon must lie within two days")
        if self.solar_penetration < 0 or self.cloud_noise < 0 or self.load_noise < 0:
            raise ValueError("penetration and noise levels must be nonnegative")
        lo, hi = self.pf_range
        if not (0 < lo <= hi <= 1):
            raise ValueError("power factors must lie in (0, 1]")
        if self.load_peaks is not None and len(self.load_peaks) != f.N:
            raise ValueError("one load peak per bus required")
        if self.sunset_min <= self.sunrise_min:
            raise ValueError("sunset must follow sunrise")


@dataclass
class ScenarioSet:
    feeder_fingerprint: str
    times: np.ndarray
    conditions: list[GridConditions]
    config: ScenarioConfig
    seed: int | None
    power_factors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.conditions)

    def thetas(self) -> np.ndarray:
        return np.stack([g.theta for g in self.conditions])

    def subset(self, idx) -> "ScenarioSet":
        idx = np.asarray(idx)
        return ScenarioSet(self.feeder_fingerprint, self.times[idx],
                           [self.conditions[i] for i in idx], self.config, self.seed,
                           self.power_factors)


def _load_template(t_hours: np.ndarray, shift: float) -> np.ndarray:
    # base + morning and evening humps
    t = t_hours - shift
    return (0.35 + 0.45 * np.exp(-0.5 * ((t - 8.0) / 1.3) ** 2)
            + 0.65 * np.exp(-0.5 * ((t - 19.0) / 2.0) ** 2))


def _solar_template(t_min: np.ndarray, sunrise: float, sunset: float) -> np.ndarray:
    u = (t_min - sunrise) / (sunset - sunrise)
    return np.where((u > 0) & (u < 1), np.sin(np.pi * np.clip(u, 0, 1)) ** 1.5, 0.0)


def gen_scenarios(f: FeederModel, config: ScenarioConfig | None = None, seed: int = 0) -> ScenarioSet:
    """Seeded daily load/solar profiles for every bus of ``f``.

    Profiles are shaped over the whole day at one-minute resolution, optionally
    median-filtered, scaled to their peaks and then sampled on the configured
    horizon. Reactive loads follow from per-bus lagging power factors drawn once.
    """
    config = config or ScenarioConfig()
    config.validate(f)
    rng = np.random.default_rng(seed)
    N, Ng = f.N, f.Ng
    peaks = np.asarray(config.load_peaks if config.load_peaks is not None else f.p_nominal, dtype=float)
    peaks = peaks * config.load_scale
    day_end = 2880 if config.end_min > 1440 else 1440
    minutes = np.arange(0, day_end)
    hours = (minutes % 1440) / 60.0

    pf = rng.uniform(config.pf_range[0], config.pf_range[1], size=N)
    shifts = rng.normal(0.0, 0.5, size=N)
    p_prof = np.empty((N, len(minutes)))
    for n in range(N):
        base = _load_template(hours, shifts[n])
        noise = 1.0 + config.load_noise * rng.standard_normal(len(minutes))
        prof = np.clip(base * noise, 0.0, None)
        if config.median_order:
            prof = median_filter(prof, config.median_order)
        top = prof.max()
        p_prof[n] = peaks[n] * prof / top if top > 0 else 0.0

    sol = _solar_template(minutes % 1440, config.sunrise_min, config.sunset_min)
    c_prof = np.empty((Ng, len(minutes)))
    for i, n in enumerate(f.inverter_buses):
        prof = sol.copy()
        if config.cloud_noise > 0:
            prof = prof * np.clip(1.0 - np.abs(config.cloud_noise * rng.standard_normal(len(minutes))), 0.0, 1.0)
        if config.median_order:
            prof = median_filter(prof, config.median_order)
        top = sol.max()
        c_prof[i] = config.solar_penetration * max(peaks[n - 1], 0.0) * prof / top if top > 0 else 0.0

    tan_phi = np.tan(np.arccos(pf))
    times = np.arange(config.start_min, config.end_min + 1, config.interval_min)
    conds = [
        GridConditions(p_prof[:, t].copy(), p_prof[:, t] * tan_phi, np.maximum(c_prof[:, t], 0.0))
        for t in times
    ]
    return ScenarioSet(f.fingerprint(), times, conds, config, seed, pf)


def oversized_ratings(f: FeederModel, solar_peak, factor: float = 1.1) -> np.ndarray:
    """Inverter ratings sized at ``factor`` times the peak solar at each inverter bus."""
    return factor * np.asarray(solar_peak, dtype=float)


def write_scenarios_csv(f: FeederModel, sset: ScenarioSet, path) -> None:
    inv_pos = {int(n): i for i, n in enumerate(f.inverter_buses)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bus", "p_load", "q_load", "pg_cap"])
        for t, g in zip(sset.times, sset.conditions):
            for n in range(1, f.N + 1):
                cap = repr(float(g.pg_cap[inv_pos[n]])) if n in inv_pos else ""
                w.writerow([int(t), int(f.bus_ids[n]), repr(float(g.p_load[n - 1])),
                            repr(float(g.q_load[n - 1])), cap])


def read_scenarios_csv(f: FeederModel, path) -> ScenarioSet:
    rows: dict[int, dict[int, tuple]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["t"])
            n = f.internal_bus(int(row["bus"]))
            cap = row.get("pg_cap", "")
            rows.setdefault(t, {})[n] = (float(row["p_load"]), float(row["q_load"]),
                                         float(cap) if cap not in ("", None) else None)
    times = np.array(sorted(rows))
    conds = []
    for t in times:
        rec = rows[t]
        if len(rec) != f.N:
            raise ValueError(f"time {t}: expected {f.N} buses, got {len(rec)}")
        p = [rec[n][0] for n in range(1, f.N + 1)]
        q = [rec[n][1] for n in range(1, f.N + 1)]
        caps = []
        for n in f.inverter_buses:
            if rec[int(n)][2] is None:
                raise ValueError(f"time {t}: missing pg_cap at inverter bus {f.bus_ids[n]}")
            caps.append(rec[int(n)][2])
        conds.append(pack_theta(f, p, q, caps))
    return ScenarioSet(f.fingerprint(), times, conds, ScenarioConfig(), None)


def config_to_dict(config: ScenarioConfig) -> dict:
    d = asdict(config)
    if d["load_peaks"] is not None:
        d["load_peaks"] = [float(v) for v in d["load_peaks"]]
    d["pf_range"] = list(d["pf_range"])
    return d


def config_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    if "pf_range" in d:
        d["pf_range"] = tuple(d["pf_range"])
    return ScenarioConfig(**d)
