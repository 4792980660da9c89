"""End-to-end pipelines and evaluation metrics.

A pipeline run builds the OPF dataset once, trains one surrogate per target and
method on a temporally downsampled split, predicts the remaining instances and
writes plot-ready CSV files. Auxiliary experiments (RPE versus training size,
random-feature dimension sweep, cluster hold-out, AC power-flow feasibility)
reuse the same dataset.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gp, rf
from .acpf import PowerFlowError, check_limits, net_injections, solve_pf
from .feeder import (FeederModel, ScenarioConfig, ScenarioSet, bundled_feeder, config_from_dict, gen_scenarios,
                     load_feeder, read_scenarios_csv)
from .lopf import build_rx, solve_lopf
from .sensitivity import SensitivityError, build_su, solve_sensitivities
from .socp_opf import (Layout, OpfRecord, OpfSolveError, PrimalDualSolution, build_socp, instantiate, make_record,
                       solve, write_records)

log = logging.getLogger(__name__)

METHODS = ("gp", "si-gp", "rf-gp", "rf-si-gp", "lopf")
CSV_HEADERS = {
    "rpe.csv": ["target", "method", "instance", "rpe", "std"],
    "ecdf.csv": ["method", "abs_error", "fraction"],
    "timing.csv": ["stage", "method", "target", "T", "count", "seconds_total", "seconds_per_item"],
    "pf_report.csv": ["method", "instance", "t", "max_deviation", "voltage_violations", "current_violations",
                      "pf_residual", "opf_within_band"],
    "dsweep.csv": ["D", "target", "mean_rpe", "train_seconds", "predict_seconds"],
    "cluster.csv": ["phase", "target", "instance", "cluster", "truth", "mean", "std"],
    "bands.csv": ["target", "method", "rank", "instance", "truth", "mean", "lo2", "hi2", "lo3", "hi3"],
    "rpe_vs_T.csv": ["target", "method", "stride_min", "T", "mean_rpe"],
}


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


class PipelineError(RuntimeError):
    """Stage-tagged failure of a pipeline run."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# -- metrics ------------------------------------------------------------------------


def rpe(estimates, truths, normalizer: float | None = None) -> np.ndarray:
    """Relative percent error ``100 |x_hat - x| / |mean(pool)|``.

    The pool defaults to ``truths``. The absolute value keeps the metric
    nonnegative for targets whose mean is negative (e.g. absorbed reactive power).
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("estimates and truths must have equal length")
    if normalizer is None:
        if tru.size == 0:
            raise ValueError("empty truth pool")
        normalizer = float(np.mean(tru))
    if normalizer == 0 or not np.isfinite(normalizer):
        raise ValueError("RPE normalizer is zero (degenerate truth pool)")
    return 100.0 * np.abs(est - tru) / abs(normalizer)


def ecdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Right-continuous empirical CDF evaluated at the distinct sample values."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("ecdf of an empty sample")
    xs, counts = np.unique(v, return_counts=True)
    return xs, np.cumsum(counts) / v.size


def quartiles(values) -> dict[str, float]:
    q = np.quantile(np.asarray(values, dtype=float), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    distortion: list[float]
    iterations: int


def kmeans(X, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm from a seeded k-means++ start.

    Stops at an assignment fixpoint or after ``max_iter`` iterations. Empty
    clusters keep their previous center.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if not isinstance(k, (int, np.integer)) or k < 1 or k > n:
        raise ValueError(f"k must be an integer in [1, {n}]")
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot > 0:
            j = int(rng.choice(n, p=d2 / tot))
        else:
            # only duplicates left; pick an unused point
            j = int(rng.choice(np.setdiff1d(np.arange(n), idx)))
        idx.append(j)
        d2 = np.minimum(d2, np.sum((X - X[j]) ** 2, axis=1))
    C = X[idx].copy()

    def assign(C):
        D = np.sum(X ** 2, 1)[:, None] - 2 * X @ C.T + np.sum(C ** 2, 1)[None, :]
        lab = np.argmin(D, axis=1)
        return lab, float(np.sum((X - C[lab]) ** 2))

    labels, dist = assign(C)
    hist = [dist]
    it = 0
    for it in range(1, max_iter + 1):
        for c in range(k):
            mem = labels == c
            if mem.any():
                C[c] = X[mem].mean(axis=0)
        new, dist = assign(C)
        hist.append(dist)
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, C, hist, it)


def order_clusters(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters 0..k-1 by first appearance, so labels follow the time axis."""
    seen: dict[int, int] = {}
    for lab in labels:
        seen.setdefault(int(lab), len(seen))
    return np.array([seen[int(lab)] for lab in labels])


# -- targets ------------------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    kind: str  # pg, qg or v
    bus: int  # original bus id

    def __str__(self) -> str:
        return f"{self.kind}:{self.bus}"

    def column(self, f: FeederModel) -> int:
        L = Layout(f.N, f.Ng)
        if self.kind == "v":
            return L.vbus(f.internal_bus(self.bus))
        j = f.inverter_index(self.bus)
        return (L.pg if self.kind == "pg" else L.qg).start + j


def parse_target(s: str) -> Target:
    try:
        kind, bus = s.split(":")
        bus_id = int(bus)
    except ValueError:
        raise ConfigError(f"target {s!r} must look like 'qg:5'") from None
    if kind not in ("pg", "qg", "v"):
        raise ConfigError(f"unknown target kind {kind!r}")
    return Target(kind, bus_id)


def setpoint_targets(f: FeederModel) -> list[Target]:
    buses = [int(f.bus_ids[n]) for n in f.inverter_buses]
    return [Target("pg", b) for b in buses] + [Target("qg", b) for b in buses]


# -- dataset ------------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    """OPF records for every scenario, shared by all targets of a run."""

    feeder: FeederModel
    records: list[OpfRecord]
    times: np.ndarray
    skipped: list[int] = field(default_factory=list)  # scenario positions dropped as inexact
    solve_seconds: float = 0.0
    jac_seconds: float = 0.0
    jac_count: int = 0
    degenerate: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([r.theta for r in self.records])

    @property
    def X(self) -> np.ndarray:
        return np.stack([r.x for r in self.records])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json().encode())
        return h.hexdigest()

    def ensure_jacobians(self, idx, drop_degenerate: bool = False, method: str = "auto") -> None:
        """Compute minimizer Jacobians at the given record positions (once each).

        Degenerate instances (a binding constraint with a vanishing dual) keep
        their label in every case. With ``drop_degenerate`` they get no
        Jacobian; otherwise one is attached whenever it exists.
        """
        ps = None
        for i in idx:
            rec = self.records[int(i)]
            if rec.jac_exists is not None:
                continue
            if ps is None:
                ps = build_socp(self.feeder)
            t0 = time.perf_counter()
            cp = instantiate(ps, rec.theta)
            sol = PrimalDualSolution(rec.x, rec.lam, rec.mu, rec.nu, rec.objective, rec.status)
            try:
                k = build_su(cp, sol)
                if k.degenerate:
                    self.degenerate += 1
                if k.degenerate and drop_degenerate:
                    rec.jac, rec.jac_exists = None, False
                else:
                    sr = solve_sensitivities(k, method=method)
                    rec.jac, rec.jac_exists = sr.jac, sr.exists
            except SensitivityError as e:
                log.info("no sensitivities at record %d: %s", i, e)
                rec.jac, rec.jac_exists = None, False
            self.jac_seconds += time.perf_counter() - t0
            self.jac_count += 1

    def training_set(self, idx, target: Target, with_grads: bool) -> gp.TrainingSet:
        """Training set for one target. With gradients, samples lacking a Jacobian are left out."""
        col = target.column(self.feeder)
        idx = np.asarray(idx, dtype=int)
        if with_grads:
            idx = np.array([i for i in idx if self.records[i].jac is not None], dtype=int)
            if idx.size == 0:
                raise PipelineError("train", f"no training sample of {target} has a Jacobian")
        X = np.stack([self.records[i].theta for i in idx])
        y = np.array([self.records[i].x[col] for i in idx])
        G = np.stack([self.records[i].jac[col] for i in idx]) if with_grads else None
        return gp.TrainingSet(X, y, G, str(target))


def build_dataset(f: FeederModel, sset: ScenarioSet | np.ndarray, with_sensitivities=False,
                  drop_degenerate: bool = False, skip_inexact: bool = True) -> Dataset:
    """Solve the OPF for every scenario.

    ``with_sensitivities`` is a bool or an iterable of scenario positions at
    which Jacobians are needed (training points only, typically).
    """
    if isinstance(sset, ScenarioSet):
        thetas, times = sset.thetas(), np.asarray(sset.times)
    else:
        thetas = np.atleast_2d(np.asarray(sset, dtype=float))
        times = np.arange(len(thetas))
    ps = build_socp(f)
    recs, kept_times, skipped = [], [], []
    t0 = time.perf_counter()
    for i, th in enumerate(thetas):
        cp = instantiate(ps, th)
        sol = solve(cp)
        rec = make_record(cp, sol, t=int(times[i]))
        if rec.exact_gap_max > 1e-6 and skip_inexact:
            log.warning("instance %d: relaxation inexact (gap %.2e), skipped", i, rec.exact_gap_max)
            skipped.append(i)
            continue
        recs.append(rec)
        kept_times.append(times[i])
    ds = Dataset(f, recs, np.array(kept_times), skipped, time.perf_counter() - t0)
    if with_sensitivities is True:
        ds.ensure_jacobians(range(len(ds)), drop_degenerate)
    elif with_sensitivities is not False and with_sensitivities is not None:
        pos = {int(t): j for j, t in enumerate(ds.times)}
        want = [pos[int(times[i])] for i in with_sensitivities if int(times[i]) in pos]
        ds.ensure_jacobians(want, drop_degenerate)
    return ds


def split_by_stride(times, stride_min: int, start: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Every ``stride_min`` simulated minutes for training, the rest for testing."""
    times = np.asarray(times)
    if stride_min < 1:
        raise ConfigError("train_stride_min must be >= 1")
    start = int(times.min()) if start is None else start
    tr = (times - start) % stride_min == 0
    return np.flatnonzero(tr), np.flatnonzero(~tr)


# -- models -------------------------------------------------------------------------


@dataclass(eq=False)
class Fitted:
    method: str
    model: object
    train_seconds: float


def fit_target(ds: Dataset, train_idx, target: Target, methods, rf_dim: int = 1600, rf_seed: int = 0,
               seed: int = 0, hyper: gp.Hyperparams | None = None) -> dict[str, Fitted]:
    """Train every requested learning method on one target, sharing hyperparameters."""
    need_grads = any(m in ("si-gp", "rf-si-gp") for m in methods)
    ts_si = ds.training_set(train_idx, target, True) if need_grads else None
    ts_plain = ds.training_set(train_idx, target, False)
    if hyper is None:
        hyper, _ = gp.fit_hyperparams(ts_si if need_grads else ts_plain, seed=seed, fit_epsilon=need_grads)
    out = {}
    for m in methods:
        if m == "lopf":
            continue
        t0 = time.perf_counter()
        if m == "gp":
            model = gp.train(ts_plain, hyper, "plain")
        elif m == "si-gp":
            model = gp.train(ts_si, hyper, "si")
        elif m == "rf-gp":
            model = rf.train_rf(ts_plain, hyper, mode="rf-gp", D=rf_dim, seed=rf_seed)
        elif m == "rf-si-gp":
            model = rf.train_rf(ts_si, hyper, mode="rf-si-gp", D=rf_dim, seed=rf_seed)
        else:
            raise ConfigError(f"unknown method {m!r}")
        out[m] = Fitted(m, model, time.perf_counter() - t0)
    return out


def predict_model(model, theta) -> tuple[float, float]:
    """Posterior mean and standard deviation for either model family."""
    if isinstance(model, rf.RfModel):
        return rf.predict_rf(model, theta, return_std=True)
    return gp.predict(model, theta, return_std=True)


def predict_batch(model, thetas) -> tuple[np.ndarray, np.ndarray, float]:
    """Means, standard deviations and seconds per prediction."""
    thetas = np.atleast_2d(thetas)
    mu = np.empty(len(thetas))
    sd = np.empty(len(thetas))
    t0 = time.perf_counter()
    for i, th in enumerate(thetas):
        mu[i], sd[i] = predict_model(model, th)
    dt = time.perf_counter() - t0
    return mu, sd, dt / max(len(thetas), 1)


def project_setpoints(f: FeederModel, theta, pg, qg) -> tuple[np.ndarray, np.ndarray]:
    """Clip predicted setpoints to ``0 <= pg <= cap`` and scale them into the inverter disc."""
    cap = np.asarray(theta)[2 * f.N:]
    pg = np.clip(pg, 0.0, cap)
    qg = np.asarray(qg, dtype=float).copy()
    s = np.hypot(pg, qg)
    over = s > f.sbar
    if np.any(over):
        qmax = np.sqrt(np.maximum(f.sbar[over] ** 2 - pg[over] ** 2, 0.0))
        qg[over] = np.clip(qg[over], -qmax, qmax)
    return pg, qg


def pf_evaluate(f: FeederModel, theta, pg, qg, band: float = 0.03, tol: float = 1e-12):
    """AC power flow at the given setpoints; returns the state and its limit report."""
    p, q = net_injections(f, theta, pg, qg)
    v0 = f.v0_fixed if f.v0_fixed is not None else 1.0
    st = solve_pf(f, p, q, v0=v0, tol=tol)
    return st, check_limits(st, f, band)


# -- configuration ------------------------------------------------------------------


@dataclass
class PipelineConfig:
    feeder: str = "feeder13"
    scenarios: dict | str = field(default_factory=dict)  # ScenarioConfig fields or a scenario CSV path
    scenario_seed: int = 0
    train_stride_min: int = 30
    methods: list[str] = field(default_factory=lambda: ["gp", "si-gp", "rf-si-gp", "lopf"])
    targets: list[str] | str = "setpoints"
    rf_dim: int = 1600
    rf_seed: int = 0
    fit_seed: int = 0
    kmeans_seed: int = 0
    out_dir: str = "out"
    drop_degenerate: bool = False
    band: float = 0.03
    rpe_strides: list[int] = field(default_factory=lambda: [50, 40, 30, 20])
    dsweep: list[int] = field(default_factory=lambda: list(range(600, 2001, 200)))
    cluster_k: int = 20
    cluster_train: int = 15
    cluster_per: int = 2
    focus_target: str | None = None  # target of the D-sweep and cluster experiments; first qg target by default
    experiments: list[str] = field(default_factory=lambda: ["bands", "ecdf", "pf", "rpe_vs_T", "dsweep",
                                                             "cluster"])

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        kw = {}
        if "split" in d:
            kw["train_stride_min"] = int(d.pop("split").get("train_stride_min", 30))
        if "rf" in d:
            r = d.pop("rf")
            kw["rf_dim"] = int(r.get("D", 1600))
            kw["rf_seed"] = int(r.get("seed", 0))
        if "seeds" in d:
            s = d.pop("seeds")
            for key in ("scenario", "fit", "kmeans"):
                if key in s:
                    kw[f"{key}_seed"] = int(s[key])
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw.update(d)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {METHODS}, got {self.methods}")
        if self.rf_dim < 1:
            raise ConfigError("rf D must be positive")
        if self.train_stride_min < 1:
            raise ConfigError("train_stride_min must be >= 1")
        if not 0 < self.cluster_train < self.cluster_k:
            raise ConfigError("cluster_train must lie strictly between 0 and cluster_k")
        if self.band <= 0:
            raise ConfigError("band must be positive")


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return PipelineConfig.from_dict(d)


def resolve_feeder(spec: str) -> FeederModel:
    p = Path(spec)
    if p.exists():
        return load_feeder(p)
    try:
        return bundled_feeder(spec)
    except (KeyError, FileNotFoundError, ValueError) as e:
        raise ConfigError(f"unknown feeder {spec!r}") from e


def resolve_scenarios(f: FeederModel, cfg: PipelineConfig) -> ScenarioSet:
    if isinstance(cfg.scenarios, str):
        try:
            return read_scenarios_csv(f, cfg.scenarios)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot read scenarios {cfg.scenarios}: {e}") from e
    try:
        sc = config_from_dict(cfg.scenarios) if cfg.scenarios else ScenarioConfig()
        return gen_scenarios(f, sc, seed=cfg.scenario_seed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scenario settings: {e}") from e


# -- report -------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    rpe: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)  # target -> method -> values
    std: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    abs_errors: dict[str, np.ndarray] = field(default_factory=dict)  # method -> pooled errors
    abs_errors_by_kind: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)  # "pg"/"qg" -> method -> errors
    ecdf: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    boxplot: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    timings: list[dict] = field(default_factory=list)
    clamped: dict[str, int] = field(default_factory=dict)
    feasibility: dict[str, dict[str, float]] = field(default_factory=dict)
    rpe_vs_T: list[dict] = field(default_factory=list)
    dsweep: list[dict] = field(default_factory=list)
    cluster: dict[str, float] = field(default_factory=dict)
    dataset_hash: str = ""
    T: int = 0
    n_test: int = 0
    checks: dict[str, bool] = field(default_factory=dict)

    def mean_rpe(self, method: str) -> float:
        vals = [v[method] for v in self.rpe.values() if method in v]
        return float(np.mean(np.concatenate(vals))) if vals else float("nan")

    def summary(self) -> dict:
        return {
            "dataset_hash": self.dataset_hash,
            "T": self.T,
            "n_test": self.n_test,
            "mean_rpe": {m: self.mean_rpe(m) for m in METHODS if not np.isnan(self.mean_rpe(m))},
            "boxplot": self.boxplot,
            "clamped": self.clamped,
            "feasibility": self.feasibility,
            "cluster": self.cluster,
            "checks": self.checks,
        }


class _Writer:
    """Tracks emitted files so a failed run can remove its partial artifacts."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.written: list[Path] = []

    def csv(self, name: str, rows) -> None:
        p = self.dir / name
        self.written.append(p)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADERS[name])
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.written.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


# -- pipeline -----------------------------------------------------------------------


def _stage(name: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (PipelineError, ConfigError):
        raise
    except (OpfSolveError, PowerFlowError, gp.GpError, np.linalg.LinAlgError) as e:
        raise PipelineError(name, f"{type(e).__name__}: {e}") from e


def run_pipeline(cfg: PipelineConfig | dict) -> EvaluationReport:
    """Dataset creation, per-target training, prediction and report emission."""
    if isinstance(cfg, dict):
        cfg = PipelineConfig.from_dict(cfg)
    cfg.validate()
    f = resolve_feeder(cfg.feeder)
    sset = resolve_scenarios(f, cfg)
    if cfg.targets == "setpoints":
        targets = setpoint_targets(f)
    else:
        targets = [parse_target(t) for t in cfg.targets]
    for t in targets:
        try:
            t.column(f)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"target {t} not available on feeder {f.name}: {e}") from e
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w = _Writer(out)
    try:
        return _run(cfg, f, sset, targets, w)
    except Exception:
        w.cleanup()
        raise


def _run(cfg: PipelineConfig, f: FeederModel, sset: ScenarioSet, targets: list[Target], w: _Writer):
    rep = EvaluationReport()
    learn = [m for m in cfg.methods if m != "lopf"]
    si_needed = any(m in ("si-gp", "rf-si-gp") for m in cfg.methods)
    timing: list[list] = []

    # (1) dataset, shared by every target
    ds = _stage("dataset", build_dataset, f, sset, False)
    tr, te = split_by_stride(ds.times, cfg.train_stride_min)
    if tr.size == 0 or te.size == 0:
        raise PipelineError("split", "train or test split is empty")
    if si_needed:
        _stage("sensitivities", ds.ensure_jacobians, tr, cfg.drop_degenerate)
    write_records(ds.records, w.path("dataset.jsonl"))
    rep.dataset_hash = ds.content_hash()
    rep.T, rep.n_test = int(tr.size), int(te.size)
    timing.append(["socp_solve", "socp", "", rep.T, len(sset), ds.solve_seconds, ds.solve_seconds / len(sset)])
    if ds.jac_count:
        timing.append(["sensitivity", "socp", "", rep.T, ds.jac_count, ds.jac_seconds, ds.jac_seconds / ds.jac_count])
    X, TH = ds.X, ds.thetas

    # (2)+(3) train per target and method, predict the held-out split
    preds: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    rpe_rows = []
    for tg in targets:
        col = tg.column(f)
        truth = X[te, col]
        norm = float(np.mean(truth))
        fitted = _stage("train", fit_target, ds, tr, tg, learn, cfg.rf_dim, cfg.rf_seed, cfg.fit_seed) if learn else {}
        preds[str(tg)] = {}
        rep.rpe[str(tg)] = {}
        rep.std[str(tg)] = {}
        for m, fit in fitted.items():
            mu, sd, per = _stage("predict", predict_batch, fit.model, TH[te])
            preds[str(tg)][m] = (mu, sd)
            timing.append(["train", m, str(tg), rep.T, 1, fit.train_seconds, fit.train_seconds])
            timing.append(["predict", m, str(tg), rep.T, te.size, per * te.size, per])
            rep.clamped[f"{tg}/{m}"] = int(fit.model.clamped)
        for m, (mu, sd) in preds[str(tg)].items():
            r = rpe(mu, truth, norm)
            rep.rpe[str(tg)][m] = r
            rep.std[str(tg)][m] = sd
            rpe_rows += [[str(tg), m, int(i), r[k], sd[k]] for k, i in enumerate(te)]
    if "lopf" in cfg.methods:
        lg = build_rx(f)
        t0 = time.perf_counter()
        lres = [_stage("lopf", solve_lopf, f, TH[i], lg=lg) for i in te]
        dt = time.perf_counter() - t0
        timing.append(["predict", "lopf", "", 0, te.size, dt, dt / te.size])
        for tg in targets:
            if tg.kind == "v":
                continue
            j = f.inverter_index(tg.bus)
            mu = np.array([getattr(r, tg.kind)[j] for r in lres])
            truth = X[te, tg.column(f)]
            preds[str(tg)]["lopf"] = (mu, np.zeros_like(mu))
            r = rpe(mu, truth, float(np.mean(truth)))
            rep.rpe[str(tg)]["lopf"] = r
            rpe_rows += [[str(tg), "lopf", int(i), r[k], 0.0] for k, i in enumerate(te)]
    w.csv("rpe.csv", rpe_rows)
    for tg, by in rep.rpe.items():
        rep.boxplot[tg] = {m: quartiles(v) for m, v in by.items()}

    # absolute setpoint errors pooled over targets, per method
    for m in cfg.methods:
        errs = [np.abs(preds[str(tg)][m][0] - X[te, tg.column(f)]) for tg in targets
                if m in preds[str(tg)] and tg.kind != "v"]
        if errs:
            rep.abs_errors[m] = np.concatenate(errs)
        for kind in ("pg", "qg"):
            errs = [np.abs(preds[str(tg)][m][0] - X[te, tg.column(f)]) for tg in targets
                    if m in preds[str(tg)] and tg.kind == kind]
            if errs:
                rep.abs_errors_by_kind.setdefault(kind, {})[m] = np.concatenate(errs)
    if "ecdf" in cfg.experiments:
        rows = []
        for m, e in rep.abs_errors.items():
            xs, fr = ecdf(e)
            rep.ecdf[m] = (xs, fr)
            rows += [[m, a, b] for a, b in zip(xs, fr)]
        w.csv("ecdf.csv", rows)

    if "bands" in cfg.experiments:
        rows = []
        for tg in targets:
            truth = X[te, tg.column(f)]
            order = np.argsort(truth, kind="stable")
            for m, (mu, sd) in preds[str(tg)].items():
                for rank, k in enumerate(order):
                    rows.append([str(tg), m, rank, int(te[k]), truth[k], mu[k], mu[k] - 2 * sd[k], mu[k] + 2 * sd[k],
                                 mu[k] - 3 * sd[k], mu[k] + 3 * sd[k]])
        w.csv("bands.csv", rows)

    if "pf" in cfg.experiments:
        rows = _stage("pf", _pf_experiment, cfg, f, ds, te, targets, preds, rep)
        w.csv("pf_report.csv", rows)

    if "rpe_vs_T" in cfg.experiments and any(m in ("gp", "si-gp") for m in learn):
        rows = _stage("rpe_vs_T", _rpe_vs_T, cfg, ds, targets, rep)
        w.csv("rpe_vs_T.csv", rows)

    if cfg.focus_target is not None:
        focus = parse_target(cfg.focus_target)
    else:
        focus = next((t for t in targets if t.kind == "qg"), targets[0])
    if "dsweep" in cfg.experiments and cfg.dsweep:
        rows = _stage("dsweep", _dsweep, cfg, ds, tr, te, focus, si_needed, rep)
        w.csv("dsweep.csv", rows)

    if "cluster" in cfg.experiments:
        rows = _stage("cluster", _cluster_experiment, cfg, ds, focus, si_needed, rep)
        w.csv("cluster.csv", rows)

    w.csv("timing.csv", timing)
    rep.timings = [dict(zip(CSV_HEADERS["timing.csv"], r)) for r in timing]
    rep.checks = self_check(rep)
    with open(w.path("report.json"), "w") as fh:
        json.dump(rep.summary(), fh, indent=2, default=float)
    return rep


def _pf_experiment(cfg, f, ds, te, targets, preds, rep) -> list[list]:
    """AC power flow under predicted setpoints, against the OPF and an uncontrolled baseline."""
    X, TH = ds.X, ds.thetas
    L = Layout(f.N, f.Ng)
    names = {str(t) for t in targets}
    have = [m for m in cfg.methods
            if all(str(t) in names and m in preds[str(t)] for t in setpoint_targets(f))]
    rows = []
    opf_ok = np.zeros(te.size, dtype=bool)
    cases = [("opf", None), ("no-control", None)] + [(m, m) for m in have]
    for name, m in cases:
        n_ok = n_viol = n_bad = 0
        worst_res = 0.0
        for k, i in enumerate(te):
            th = TH[i]
            if name == "opf":
                pg, qg = X[i, L.pg], X[i, L.qg]
            elif name == "no-control":
                pg, qg = np.zeros(f.Ng), np.zeros(f.Ng)
            else:
                pg = np.array([preds[f"pg:{int(f.bus_ids[n])}"][m][0][k] for n in f.inverter_buses])
                qg = np.array([preds[f"qg:{int(f.bus_ids[n])}"][m][0][k] for n in f.inverter_buses])
                pg, qg = project_setpoints(f, th, pg, qg)
            st, lr = pf_evaluate(f, th, pg, qg, cfg.band)
            worst_res = max(worst_res, st.residual)
            within = lr.voltage_violations == 0
            if name == "opf":
                opf_ok[k] = within
            n_ok += within
            n_viol += not within
            n_bad += bool(opf_ok[k] and not within)
            rows.append([name, int(i), int(ds.times[i]), lr.worst_deviation, lr.voltage_violations,
                         lr.current_violations, st.residual, bool(opf_ok[k])])
        rep.feasibility[name] = {"within_band": int(n_ok), "violating": int(n_viol),
                                 "violating_where_opf_ok": int(n_bad), "max_pf_residual": float(worst_res)}
    return rows


def _rpe_vs_T(cfg, ds, targets, rep) -> list[list]:
    rows = []
    meths = [m for m in ("gp", "si-gp") if m in cfg.methods]
    for stride in cfg.rpe_strides:
        tr, te = split_by_stride(ds.times, stride)
        if "si-gp" in meths:
            ds.ensure_jacobians(tr, cfg.drop_degenerate)
        for tg in targets:
            col = tg.column(ds.feeder)
            fitted = fit_target(ds, tr, tg, meths, seed=cfg.fit_seed)
            truth = ds.X[te, col]
            for m, fit in fitted.items():
                mu, _, _ = predict_batch(fit.model, ds.thetas[te])
                r = float(np.mean(rpe(mu, truth)))
                rows.append([str(tg), m, stride, int(tr.size), r])
                rep.rpe_vs_T.append({"target": str(tg), "method": m, "stride_min": stride, "T": int(tr.size),
                                     "mean_rpe": r})
    return rows


def _dsweep(cfg, ds, tr, te, tg, si, rep) -> list[list]:
    mode = "rf-si-gp" if si else "rf-gp"
    ts = ds.training_set(tr, tg, si)
    h, _ = gp.fit_hyperparams(ts, seed=cfg.fit_seed, fit_epsilon=si)
    truth = ds.X[te, tg.column(ds.feeder)]
    rows = []
    for D in cfg.dsweep:
        t0 = time.perf_counter()
        m = rf.train_rf(ts, h, mode=mode, D=int(D), seed=cfg.rf_seed)
        t_train = time.perf_counter() - t0
        mu, _, per = predict_batch(m, ds.thetas[te])
        r = float(np.mean(rpe(mu, truth)))
        rows.append([int(D), str(tg), r, t_train, per])
        rep.dsweep.append({"D": int(D), "target": str(tg), "mean_rpe": r, "train_seconds": t_train,
                           "predict_seconds": per})
    return rows


def cluster_holdout(ds: Dataset, tg: Target, k: int = 20, n_train: int = 15, per_cluster: int = 2,
                    seed: int = 0, si: bool = True, drop_degenerate: bool = False):
    """Train on samples from the first ``n_train`` clusters, then on samples from all.

    Clusters are found by k-means on theta and numbered by first appearance in
    time. ``per_cluster`` training samples are drawn from each cluster (seeded);
    the evaluation pool is every non-training instance of the held-out clusters.
    Returns per-phase (indices, clusters, truth, mean, std).
    """
    km = kmeans(ds.thetas, k, seed=seed)
    lab = order_clusters(km.labels)
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(k):
        mem = np.flatnonzero(lab == c)
        picks.append(np.sort(rng.choice(mem, size=min(per_cluster, mem.size), replace=False)))
    train_a = np.concatenate(picks[:n_train])
    train_b = np.concatenate(picks)
    held = np.setdiff1d(np.flatnonzero(lab >= n_train), train_b)
    if held.size == 0:
        raise PipelineError("cluster", "held-out clusters have no evaluation instances")
    if si:
        ds.ensure_jacobians(train_b, drop_degenerate)
    meth = "si-gp" if si else "gp"
    col = tg.column(ds.feeder)
    truth = ds.X[held, col]
    out = {}
    fa = fit_target(ds, train_a, tg, [meth], seed=seed)[meth]
    out["holdout"] = (held, lab[held], truth) + predict_batch(fa.model, ds.thetas[held])[:2]
    # hyperparameters kept from the hold-out fit so only the data changes
    fb = fit_target(ds, train_b, tg, [meth], seed=seed, hyper=fa.model.hyperparams)[meth]
    out["all"] = (held, lab[held], truth) + predict_batch(fb.model, ds.thetas[held])[:2]
    return out


def _cluster_experiment(cfg, ds, tg, si, rep) -> list[list]:
    res = cluster_holdout(ds, tg, cfg.cluster_k, cfg.cluster_train, cfg.cluster_per, cfg.kmeans_seed, si,
                          cfg.drop_degenerate)
    rows = []
    for phase, (idx, lab, truth, mu, sd) in res.items():
        rows += [[phase, str(tg), int(i), int(c), a, b, s] for i, c, a, b, s in zip(idx, lab, truth, mu, sd)]
        rep.cluster[f"mean_std_{phase}"] = float(np.mean(sd))
        rep.cluster[f"mean_rpe_{phase}"] = float(np.mean(rpe(mu, truth)))
    rep.cluster["std_ratio"] = rep.cluster["mean_std_holdout"] / max(rep.cluster["mean_std_all"], 1e-300)
    return rows


def self_check(rep: EvaluationReport) -> dict[str, bool]:
    """Ordering checks reported by ``run --self-check``."""
    checks = {}
    gp_r, si_r = rep.mean_rpe("gp"), rep.mean_rpe("si-gp")
    if not (np.isnan(gp_r) or np.isnan(si_r)):
        checks["si_gp_rpe_le_gp"] = bool(si_r <= gp_r)
    if "std_ratio" in rep.cluster:
        checks["cluster_std_inflation"] = bool(rep.cluster["std_ratio"] > 1.0)
    for m, fz in rep.feasibility.items():
        if m not in ("opf", "no-control"):
            checks[f"pf_feasible_{m}"] = fz["violating_where_opf_ok"] == 0
    return checks


# -- timing -------------------------------------------------------------------------


def time_predictions(models: dict, thetas, repeats: int = 3) -> dict[str, float]:
    """Median over ``repeats`` of the mean per-instance prediction time for each model.

    One untimed pass per model comes first so caches and lazy setup do not
    land on whichever model happens to be timed first.
    """
    out = {}
    for name, m in models.items():
        predict_batch(m, thetas[:1])
        runs = [predict_batch(m, thetas)[2] for _ in range(repeats)]
        out[name] = float(np.median(runs))
    return out


def time_socp(f: FeederModel, thetas, repeats: int = 1) -> float:
    ps = build_socp(f)
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for th in thetas:
            solve(instantiate(ps, th))
        runs.append((time.perf_counter() - t0) / len(thetas))
    return float(np.median(runs))
