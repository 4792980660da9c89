"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure,
4 failed ordering checks under ``run --self-check``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gp, rf
from .acpf import PowerFlowError
from .feeder import FeederError, FeederModel, ScenarioConfig, config_from_dict, gen_scenarios, read_scenarios_csv, \
    unpack_theta, write_scenarios_csv
from .harness import (ConfigError, PipelineError, build_dataset, load_config, parse_target, pf_evaluate,
                      predict_model, resolve_feeder, run_pipeline, split_by_stride)
from .lopf import build_rx, solve_lopf
from .sensitivity import SensitivityError
from .socp_opf import OpfSolveError, build_socp, instantiate, make_record, read_records, solve

log = logging.getLogger("gpopf")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4


# -- file helpers -------------------------------------------------------------------


def read_thetas(f: FeederModel, path) -> tuple[np.ndarray, np.ndarray]:
    """Times and theta vectors from a scenario CSV, a JSON array or OPF records (.jsonl)."""
    path = Path(path)
    if path.suffix == ".jsonl":
        recs = read_records(path)
        th = np.stack([r.theta for r in recs])
        t = np.array([r.t if r.t is not None else i for i, r in enumerate(recs)])
    elif path.suffix == ".json":
        with open(path) as fh:
            d = json.load(fh)
        th = np.atleast_2d(np.asarray(d["theta"] if isinstance(d, dict) else d, dtype=float))
        t = np.arange(len(th))
    else:
        ss = read_scenarios_csv(f, path)
        th, t = ss.thetas(), ss.times
    for row in th:
        unpack_theta(f, row)  # validates length and caps
    return t, th


def write_setpoints(path, f: FeederModel, times, pg, qg) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bus", "pg", "qg"])
        for t, p, q in zip(times, pg, qg):
            for j, n in enumerate(f.inverter_buses):
                w.writerow([int(t), int(f.bus_ids[n]), repr(float(p[j])), repr(float(q[j]))])


def read_setpoints(path, f: FeederModel) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["t"])
            pg, qg = out.setdefault(t, (np.full(f.Ng, np.nan), np.full(f.Ng, np.nan)))
            j = f.inverter_index(int(row["bus"]))
            pg[j], qg[j] = float(row["pg"]), float(row["qg"])
    for t, (pg, qg) in out.items():
        if np.isnan(pg).any() or np.isnan(qg).any():
            raise ConfigError(f"setpoints for time {t} do not cover every inverter")
    return out


def _meta_path(dataset) -> Path:
    return Path(str(dataset) + ".meta.json")


# -- commands -----------------------------------------------------------------------


def cmd_opf_solve(a) -> int:
    f = resolve_feeder(a.feeder)
    if a.fix_v0 is not None:
        f = f.with_v0(a.fix_v0)
    times, th = read_thetas(f, a.theta_file)
    ps = build_socp(f)
    out = open(a.out, "w") if a.out else sys.stdout
    try:
        for t, row in zip(times, th):
            cp = instantiate(ps, row)
            rec = make_record(cp, solve(cp, kkt_tol=a.kkt_tol), t=int(t))
            out.write(rec.to_json() + "\n")
    finally:
        if a.out:
            out.close()
    return EXIT_OK


def cmd_scenarios(a) -> int:
    f = resolve_feeder(a.feeder)
    cfg = ScenarioConfig()
    if a.config:
        with open(a.config) as fh:
            cfg = config_from_dict(json.load(fh))
    write_scenarios_csv(f, gen_scenarios(f, cfg, seed=a.seed), a.out)
    return EXIT_OK


def cmd_dataset_build(a) -> int:
    f = resolve_feeder(a.feeder)
    if a.scenarios.endswith(".csv"):
        sset = read_scenarios_csv(f, a.scenarios)
    else:
        cfg = ScenarioConfig()
        if a.scenarios != "default":
            with open(a.scenarios) as fh:
                cfg = config_from_dict(json.load(fh))
        sset = gen_scenarios(f, cfg, seed=a.seed)
    ds = build_dataset(f, sset, a.with_sensitivities, a.drop_degenerate)
    with open(a.out, "w") as fh:
        for r in ds.records:
            fh.write(r.to_json() + "\n")
    meta = {"feeder": f.to_dict(), "fingerprint": f.fingerprint(), "content_hash": ds.content_hash(),
            "skipped_inexact": ds.skipped, "degenerate": ds.degenerate}
    with open(_meta_path(a.out), "w") as fh:
        json.dump(meta, fh)
    log.info("wrote %d records (%d skipped)", len(ds), len(ds.skipped))
    return EXIT_OK


def _dataset_feeder(a) -> FeederModel:
    if a.feeder:
        return resolve_feeder(a.feeder)
    meta = _meta_path(a.dataset)
    if not meta.exists():
        raise ConfigError("dataset has no metadata sidecar; pass --feeder")
    from .feeder import feeder_from_dict
    with open(meta) as fh:
        return feeder_from_dict(json.load(fh)["feeder"])


def cmd_train(a) -> int:
    f = _dataset_feeder(a)
    recs = read_records(a.dataset)
    tg = parse_target(a.target)
    col = tg.column(f)
    idx = np.arange(len(recs))
    if a.train_stride_min:
        times = np.array([r.t if r.t is not None else i for i, r in enumerate(recs)])
        idx, _ = split_by_stride(times, a.train_stride_min)
    si = a.method in ("si-gp", "rf-si-gp")
    if si:
        idx = np.array([i for i in idx if recs[i].jac is not None], dtype=int)
        if idx.size == 0:
            raise ConfigError("dataset has no sensitivities; build it with --with-sensitivities")
    X = np.stack([recs[i].theta for i in idx])
    y = np.array([recs[i].x[col] for i in idx])
    G = np.stack([recs[i].jac[col] for i in idx]) if si else None
    ts = gp.TrainingSet(X, y, G, str(tg))
    h, _ = gp.fit_hyperparams(ts, seed=a.seed, fit_epsilon=si)
    if a.method in ("gp", "si-gp"):
        m = gp.train(ts, h, "si" if si else "plain")
        d = gp.model_to_dict(m)
    else:
        m = rf.train_rf(ts, h, mode=a.method, D=a.rf_dim, seed=a.rf_seed)
        d = rf.model_to_dict(m)
    d["feeder_fingerprint"] = f.fingerprint()
    with open(a.out, "w") as fh:
        json.dump(d, fh)
    return EXIT_OK


def load_any_model(path):
    with open(path) as fh:
        d = json.load(fh)
    return rf.model_from_dict(d) if "rf" in d else gp.model_from_dict(d)


def cmd_predict(a) -> int:
    m = load_any_model(a.model)
    if a.feeder:
        times, th = read_thetas(resolve_feeder(a.feeder), a.theta_file)
    elif Path(a.theta_file).suffix in (".json", ".jsonl"):
        times, th = _read_thetas_raw(a.theta_file)
    else:
        raise ConfigError("scenario CSV theta files need --feeder")
    M = m.basis.M if isinstance(m, rf.RfModel) else m.M
    if th.shape[1] != M:
        raise ConfigError(f"theta length {th.shape[1]} does not match the model ({M})")
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean", "std"])
        for t, row in zip(times, th):
            mu, sd = predict_model(m, row)
            w.writerow([int(t), repr(float(mu)), repr(float(sd))])
    return EXIT_OK


def _read_thetas_raw(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if path.suffix == ".jsonl":
        recs = read_records(path)
        return np.array([r.t if r.t is not None else i for i, r in enumerate(recs)]), np.stack([r.theta for r in recs])
    with open(path) as fh:
        d = json.load(fh)
    th = np.atleast_2d(np.asarray(d["theta"] if isinstance(d, dict) else d, dtype=float))
    return np.arange(len(th)), th


def cmd_pf_check(a) -> int:
    f = resolve_feeder(a.feeder)
    times, th = read_thetas(f, a.theta_file)
    sp = read_setpoints(a.setpoints, f) if a.setpoints else None
    n_viol = 0
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "max_deviation", "worst_bus", "voltage_violations", "current_violations",
                    "worst_current_ratio", "pf_residual", "iterations"])
        for t, row in zip(times, th):
            if sp is None:
                pg, qg = np.zeros(f.Ng), np.zeros(f.Ng)
            elif int(t) in sp:
                pg, qg = sp[int(t)]
            else:
                raise ConfigError(f"no setpoints for time {t}")
            st, lr = pf_evaluate(f, row, pg, qg, a.band)
            n_viol += not lr.ok
            w.writerow([int(t), repr(lr.worst_deviation), lr.worst_bus, lr.voltage_violations,
                        lr.current_violations, repr(lr.worst_current_ratio), repr(st.residual), st.iterations])
    log.info("%d of %d instances violate limits", n_viol, len(th))
    return EXIT_OK


def cmd_lopf_solve(a) -> int:
    f = resolve_feeder(a.feeder)
    times, th = read_thetas(f, a.theta_file)
    lg = build_rx(f, a.v0)
    res = [solve_lopf(f, row, lg=lg, half_loss=a.half_loss) for row in th]
    write_setpoints(a.out, f, times, [r.pg for r in res], [r.qg for r in res])
    return EXIT_OK


def cmd_run(a) -> int:
    cfg = load_config(a.config)
    if a.out_dir:
        cfg.out_dir = a.out_dir
    rep = run_pipeline(cfg)
    print(json.dumps(rep.summary(), indent=2, default=float))
    if a.self_check and not all(rep.checks.values()):
        failed = [k for k, v in rep.checks.items() if not v]
        log.error("self-check failed: %s", ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpopf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    opf = sub.add_parser("opf", help="SOCP OPF").add_subparsers(dest="sub", required=True)
    s = opf.add_parser("solve", help="solve the OPF for each theta and print JSON-lines records")
    s.add_argument("--feeder", required=True)
    s.add_argument("--theta-file", required=True)
    s.add_argument("--fix-v0", type=float)
    s.add_argument("--kkt-tol", type=float, default=1e-8)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_opf_solve)

    sc = sub.add_parser("scenarios", help="scenario generation").add_subparsers(dest="sub", required=True)
    s = sc.add_parser("generate", help="write a seeded daily scenario CSV")
    s.add_argument("--feeder", required=True)
    s.add_argument("--config", help="JSON file with scenario settings")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_scenarios)

    dsp = sub.add_parser("dataset", help="OPF datasets").add_subparsers(dest="sub", required=True)
    s = dsp.add_parser("build", help="solve every scenario, optionally with sensitivities")
    s.add_argument("--feeder", required=True)
    s.add_argument("--scenarios", default="default", help="scenario CSV, settings JSON or 'default'")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--with-sensitivities", action="store_true")
    s.add_argument("--drop-degenerate", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dataset_build)

    s = sub.add_parser("train", help="train a surrogate for one target")
    s.add_argument("--dataset", required=True)
    s.add_argument("--target", required=True, help="pg:<bus>, qg:<bus> or v:<bus>")
    s.add_argument("--method", choices=["gp", "si-gp", "rf-gp", "rf-si-gp"], default="si-gp")
    s.add_argument("--rf-dim", type=int, default=1600)
    s.add_argument("--rf-seed", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-stride-min", type=int, help="use every n-th simulated minute only")
    s.add_argument("--feeder", help="feeder (defaults to the dataset's metadata)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="posterior mean and std for each theta")
    s.add_argument("--model", required=True)
    s.add_argument("--theta-file", required=True)
    s.add_argument("--feeder", help="needed for scenario CSV theta files")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    pf = sub.add_parser("pf", help="AC power flow").add_subparsers(dest="sub", required=True)
    s = pf.add_parser("check", help="power flow under setpoints and limit check")
    s.add_argument("--feeder", required=True)
    s.add_argument("--theta-file", required=True)
    s.add_argument("--setpoints", help="CSV t,bus,pg,qg; omitted means no inverter output")
    s.add_argument("--band", type=float, default=0.03)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pf_check)

    lo = sub.add_parser("lopf", help="linearized OPF baseline").add_subparsers(dest="sub", required=True)
    s = lo.add_parser("solve", help="write LOPF setpoints as CSV t,bus,pg,qg")
    s.add_argument("--feeder", required=True)
    s.add_argument("--theta-file", required=True)
    s.add_argument("--v0", type=float)
    s.add_argument("--half-loss", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_lopf_solve)

    s = sub.add_parser("run", help="end-to-end pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--self-check", action="store_true")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FeederError, FileNotFoundError, KeyError, json.JSONDecodeError, ValueError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (OpfSolveError, PowerFlowError, SensitivityError, gp.GpError, PipelineError) as e:
        log.error("solver failure: %s", e)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
