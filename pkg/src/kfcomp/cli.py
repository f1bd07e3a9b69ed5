"""Command-line entry point.

Subcommands
-----------
diagnose     rotation-sensitivity, PSD-compensation, sphere-bound, and
             compensation-scan checks; exits nonzero if an asserted
             invariant fails.
sweep        Monte-Carlo benchmark over (model, estimator, beta) cells;
             emits per-timestep and summary CSVs plus one SVG per model.
demo-scalar  the scalar noisy-gradient demo over (gamma, beta) cells.
app          one Monte-Carlo cell on one application model.

Configuration comes from a flat JSON file (``--config``); flags override
file values, and the ``KFC_SEED`` environment variable sits between them
(config < env < flag). Outputs are deterministic byte-for-byte for a given
configuration and seed.

Exit codes: 0 success, 1 invariant failure, 2 configuration error,
3 divergence budget exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics, experiments, svgplot
from .errors import ConfigError, DegenerateCase, KfcompError
from .models import APPLICATION_MODELS, registry_get
from .moments import EstimatorConfig
from .numerics import RngStream, derive_stream

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DIVERGENCE_FLAG = 0.05    # cells above this fraction are flagged in output
DIVERGENCE_BUDGET = 0.5   # cells above this fraction abort with exit 3

_COMMON_KEYS = {
    "seed", "out", "runs", "jobs", "paper_parity", "recalibrate", "backout",
}
_ALLOWED_KEYS = {
    "sweep": _COMMON_KEYS | {"models", "estimators", "beta_grid", "horizon",
                             "ekf2_mode", "alpha"},
    "app": _COMMON_KEYS | {"model", "estimator", "beta", "horizon",
                           "ekf2_mode", "alpha"},
    "demo-scalar": _COMMON_KEYS | {"gammas", "betas", "horizon"},
    "diagnose": _COMMON_KEYS | {"trials", "rotation_angles",
                                "sskf_rotation_alpha", "sphere_maps",
                                "sphere_draws", "scan_draws",
                                "case1_sigma2s", "case1_hnorms",
                                "assert_skf_psd"},
}

_DEFAULTS = {
    "seed": 0,
    "out": "out",
    "jobs": 1,
    "paper_parity": False,
    "recalibrate": True,
    "backout": True,
    "runs": 2000,
    "models": list(APPLICATION_MODELS),
    "estimators": ["EKF2", "SKF_STAR", "CKF_STAR", "SSKF"],
    "beta_grid": [0.01, 0.05, 0.2, 1.0, 5.0, 20.0, 100.0],
    "horizon": None,
    "ekf2_mode": "gaussian",
    "alpha": 1e-3,
    "model": "terrain_nav",
    "estimator": "CKF_STAR",
    "beta": 0.01,
    "gammas": [0.0, 0.5],
    "betas": [0.0, 1.0, 10.0],
    "trials": 1000,
    "rotation_angles": 256,
    "sskf_rotation_alpha": diagnostics.ROTATION_SSKF_ALPHA,
    "sphere_maps": 3,
    "sphere_draws": 200_000,
    "scan_draws": 200_000,
    "case1_sigma2s": [0.25, 1.0, 4.0],
    "case1_hnorms": [0.5, 1.0, 2.0],
    "assert_skf_psd": False,
}

_ESTIMATOR_ALIASES = {
    "EKF": "EKF", "EKF2": "EKF2",
    "SKF_STAR": "SKF_STAR", "SKF*": "SKF_STAR",
    "CKF_STAR": "CKF_STAR", "CKF*": "CKF_STAR",
    "SSKF": "SSKF",
}


def load_config(command: str, path: str | None, args) -> dict:
    """Merge defaults, config file, KFC_SEED, and flag overrides."""
    cfg = dict(_DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must contain a JSON object")
        unknown = set(file_cfg) - _ALLOWED_KEYS[command]
        if unknown:
            raise ConfigError(
                f"unknown config keys for {command}: {sorted(unknown)}"
            )
        cfg.update(file_cfg)
    env_seed = os.environ.get("KFC_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"KFC_SEED must be an integer, got {env_seed!r}") from None
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if args.paper_parity:
        cfg["paper_parity"] = True
    if args.runs is not None:
        cfg["runs"] = args.runs
    elif cfg["paper_parity"]:
        cfg["runs"] = 10_000
    _validate_types(cfg)
    return cfg


def _validate_types(cfg):
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if not isinstance(cfg["runs"], int) or cfg["runs"] < 1:
        raise ConfigError("runs must be a positive integer")
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError("jobs must be a positive integer")


def _parse_estimators(names, ekf2_mode, alpha):
    out = []
    for name in names:
        kind = _ESTIMATOR_ALIASES.get(str(name).upper())
        if kind is None:
            raise ConfigError(f"unknown estimator {name!r}")
        out.append(EstimatorConfig(kind, ekf2_mode=ekf2_mode, alpha=alpha))
    return out


def _check_beta_grid(estimators, beta_grid):
    for cfg in estimators:
        for beta in beta_grid:
            if cfg.kind in ("EKF2", "SSKF") and beta < 0:
                raise ConfigError(
                    f"beta={beta} violates the {cfg.kind} constraint beta >= 0"
                )
            if cfg.kind in ("SKF_STAR", "CKF_STAR") and beta < -1:
                raise ConfigError(
                    f"beta={beta} violates the {cfg.kind} constraint beta >= -1"
                )


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# sweep / app
# ---------------------------------------------------------------------------


def _run_cell(payload):
    (model, kind, beta, ekf2_mode, alpha, runs, horizon, seed,
     recalibrate, backout) = payload
    spec = experiments.ExperimentSpec(
        model=model, estimators=(), beta_grid=(), runs=runs, horizon=horizon,
        seed=seed, recalibrate=recalibrate, backout=backout)
    cfg = EstimatorConfig(kind, beta=beta, ekf2_mode=ekf2_mode, alpha=alpha)
    return experiments.run_application(spec, cfg)


def _run_cells(payloads, jobs):
    if jobs <= 1 or len(payloads) <= 1:
        return [_run_cell(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, payloads))


def _sweep_payloads(cfg, estimators):
    payloads = []
    for model in cfg["models"]:
        for est in estimators:
            betas = [0.0] if est.kind == "EKF" else list(cfg["beta_grid"])
            for beta in betas:
                payloads.append((model, est.kind, float(beta),
                                 cfg["ekf2_mode"], cfg["alpha"], cfg["runs"],
                                 cfg["horizon"], cfg["seed"],
                                 cfg["recalibrate"], cfg["backout"]))
    return payloads


def _detail_rows(results):
    for res in results:
        T, n = res.actual_rmse.shape
        for t in range(T):
            for i in range(n):
                yield (res.model, res.kind, res.beta, t, i,
                       res.actual_rmse[t, i], res.estimated_rmse[t, i])


def _summary_rows(results):
    for res in results:
        yield (res.model, res.kind, res.beta, res.actual_geomean,
               res.estimated_geomean, res.diverged)


def _sweep_svg(out_dir: Path, model: str, results):
    by_est = {}
    for res in results:
        if res.model == model:
            by_est.setdefault(res.kind, []).append(res)
    series = []
    for i, (kind, cells) in enumerate(sorted(by_est.items())):
        cells = sorted(cells, key=lambda r: r.beta)
        betas = np.array([c.beta for c in cells])
        color = svgplot.PALETTE[i % len(svgplot.PALETTE)]
        series.append(svgplot.Series(f"{kind} actual", betas,
                                     np.array([c.actual_geomean for c in cells]),
                                     color=color))
        series.append(svgplot.Series(f"{kind} estimated", betas,
                                     np.array([c.estimated_geomean for c in cells]),
                                     color=color, dashed=True))
    svgplot.write_chart(
        out_dir / f"sweep_{model}.svg", series,
        title=f"{model}: geometric-mean RMSE vs compensation magnitude",
        xlabel="beta", ylabel="geometric-mean RMSE", logx=True, logy=True)


def cmd_sweep(cfg) -> int:
    estimators = _parse_estimators(cfg["estimators"], cfg["ekf2_mode"], cfg["alpha"])
    _check_beta_grid(estimators, cfg["beta_grid"])
    for model in cfg["models"]:
        if model not in APPLICATION_MODELS:
            raise ConfigError(f"unknown application model {model!r}")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = _sweep_payloads(cfg, estimators)
    results = _run_cells(payloads, cfg["jobs"])
    for res in results:
        flag = " [divergence flagged]" if res.divergence_fraction > DIVERGENCE_FLAG else ""
        print(f"cell {res.model} {res.kind} beta={res.beta:g}: "
              f"actual={res.actual_geomean:.4g} estimated={res.estimated_geomean:.4g} "
              f"diverged={res.diverged}{flag}")
    _write_csv(out_dir / "sweep_detail.csv",
               ["model", "estimator", "beta", "timestep", "state_index",
                "actual_rmse", "estimated_rmse"],
               _detail_rows(results))
    _write_csv(out_dir / "sweep_summary.csv",
               ["model", "estimator", "beta", "actual_geomean",
                "estimated_geomean", "diverged"],
               _summary_rows(results))
    for model in cfg["models"]:
        _sweep_svg(out_dir, model, results)
    if any(r.divergence_fraction > DIVERGENCE_BUDGET for r in results):
        print("divergence budget exceeded", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_app(cfg) -> int:
    estimator = _parse_estimators([cfg["estimator"]], cfg["ekf2_mode"], cfg["alpha"])[0]
    _check_beta_grid([estimator], [cfg["beta"]])
    if cfg["model"] not in APPLICATION_MODELS:
        raise ConfigError(f"unknown application model {cfg['model']!r}")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    res = _run_cell((cfg["model"], estimator.kind, float(cfg["beta"]),
                     cfg["ekf2_mode"], cfg["alpha"], cfg["runs"], cfg["horizon"],
                     cfg["seed"], cfg["recalibrate"], cfg["backout"]))
    print(f"cell {res.model} {res.kind} beta={res.beta:g}: "
          f"actual={res.actual_geomean:.4g} estimated={res.estimated_geomean:.4g} "
          f"diverged={res.diverged}")
    _write_csv(out_dir / "app_detail.csv",
               ["model", "estimator", "beta", "timestep", "state_index",
                "actual_rmse", "estimated_rmse"],
               _detail_rows([res]))
    t = np.arange(res.actual_rmse.shape[0])
    series = []
    for i in range(res.actual_rmse.shape[1]):
        color = svgplot.PALETTE[i % len(svgplot.PALETTE)]
        series.append(svgplot.Series(f"state {i} actual", t, res.actual_rmse[:, i],
                                     color=color))
        series.append(svgplot.Series(f"state {i} estimated", t,
                                     res.estimated_rmse[:, i], color=color,
                                     dashed=True))
    svgplot.write_chart(out_dir / f"app_{res.model}.svg", series,
                        title=f"{res.model} / {res.kind} beta={res.beta:g}",
                        xlabel="timestep", ylabel="RMSE", logy=True)
    if res.divergence_fraction > DIVERGENCE_BUDGET:
        print("divergence budget exceeded", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# demo-scalar
# ---------------------------------------------------------------------------


def cmd_demo_scalar(cfg) -> int:
    for gamma in cfg["gammas"]:
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {gamma}")
    for beta in cfg["betas"]:
        if beta < 0:
            raise ConfigError(f"demo beta must be >= 0, got {beta}")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    horizon = cfg["horizon"] or 200
    rows = []
    charts = {g: [] for g in cfg["gammas"]}
    for gamma in cfg["gammas"]:
        for i, beta in enumerate(cfg["betas"]):
            res = experiments.run_scalar_demo(gamma, beta, runs=cfg["runs"],
                                              horizon=horizon, seed=cfg["seed"])
            for t in range(horizon):
                rows.append((gamma, beta, t, res.actual_rmse[t],
                             res.estimated_rmse[t]))
            t_axis = np.arange(horizon)
            color = svgplot.PALETTE[i % len(svgplot.PALETTE)]
            charts[gamma].append(svgplot.Series(f"beta={beta:g} actual", t_axis,
                                                res.actual_rmse, color=color))
            charts[gamma].append(svgplot.Series(f"beta={beta:g} estimated", t_axis,
                                                res.estimated_rmse, color=color,
                                                dashed=True))
            print(f"demo gamma={gamma:g} beta={beta:g}: "
                  f"terminal actual={res.actual_rmse[-1]:.4g} "
                  f"estimated={res.estimated_rmse[-1]:.4g}")
    _write_csv(out_dir / "demo_scalar.csv",
               ["gamma", "beta", "timestep", "actual_rmse", "estimated_rmse"],
               rows)
    for gamma, series in charts.items():
        svgplot.write_chart(out_dir / f"demo_scalar_gamma{gamma:g}.svg", series,
                            title=f"scalar demo, gradient error half-width {gamma:g}",
                            xlabel="timestep", ylabel="RMSE", logy=True)
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def cmd_diagnose(cfg) -> int:
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    checks = []  # (name, passed, detail)
    fig2 = registry_get("fig2_map")

    # Rotation sensitivity of every estimator family on the planar map.
    rot_cfgs = [
        EstimatorConfig("EKF"),
        EstimatorConfig("EKF2", beta=2.0, ekf2_mode="gaussian"),
        EstimatorConfig("EKF2", beta=2.0, ekf2_mode="sphere"),
        EstimatorConfig("SSKF", beta=2.0, alpha=cfg["sskf_rotation_alpha"]),
        EstimatorConfig("SKF_STAR", beta=0.0),
        EstimatorConfig("CKF_STAR", beta=0.0),
    ]
    sweep = diagnostics.rotation_sweep(fig2, rot_cfgs, cfg["rotation_angles"])
    rows = []
    for i, est in enumerate(sweep.configs):
        for k, th in enumerate(sweep.angles):
            rows.append((th, est.label(), sweep.pz[i][k, 0, 0],
                         sweep.pxz[i][k, 0, 0], sweep.pxz[i][k, 1, 0]))
    _write_csv(out_dir / "rotation_sweep.csv",
               ["angle", "estimator", "pz", "pxz_1", "pxz_2"], rows)
    ekf_pz = sweep.pz[0][:, 0, 0]
    scale = max(1.0, float(np.abs(ekf_pz).max()))
    for i in (0, 1, 2, 3):
        ptp = sweep.pz_peak_to_peak(i)
        checks.append((f"rotation_invariant_{sweep.configs[i].label()}",
                       ptp < 1e-6 * scale, f"peak-to-peak {ptp:.3e}"))
    skf_ptp = sweep.pz_peak_to_peak(4)
    checks.append(("rotation_sensitive_SKF*", skf_ptp > 0.1 * scale,
                   f"peak-to-peak {skf_ptp:.3e}"))
    ckf_margin = float((sweep.pz[5][:, 0, 0] - ekf_pz).min())
    checks.append(("ckf_dominates_ekf", ckf_margin >= -1e-8 * scale,
                   f"worst margin {ckf_margin:.3e}"))

    # PSD compensation over random polynomial maps (one CSV row per trial).
    psd_rows = []
    for label, est, assert_it in [
        ("CKF*", EstimatorConfig("CKF_STAR", beta=0.0), True),
        ("EKF", EstimatorConfig("EKF"), True),
        ("SKF*", EstimatorConfig("SKF_STAR", beta=0.0), cfg["assert_skf_psd"]),
    ]:
        rep = diagnostics.psd_compensation_check(
            est, cfg["trials"], derive_stream(cfg["seed"], "diag-psd", label))
        for trial, n, m, degree, lam, tol in rep.rows:
            psd_rows.append(("compensation_psd",
                             f"{label} trial{trial}(n={n},m={m},d={degree})",
                             1, lam, tol, int(lam < -tol)))
        if assert_it:
            checks.append((f"psd_compensation_{label}", rep.ok,
                           f"min eigenvalue {rep.min_lambda:.3e}, "
                           f"{len(rep.failures)} failures"))

    # Sphere lower bound under three radially symmetric samplers.
    from .models import random_polynomial_map
    for mi in range(cfg["sphere_maps"]):
        gen = derive_stream(cfg["seed"], "diag-sphere", mi).generator()
        n = int(gen.integers(1, 5))
        m = int(gen.integers(1, 4))
        g = random_polynomial_map(n, m, 2, 1.0, gen)
        for sampler in ("gaussian", "sphere", "mixture"):
            rep = diagnostics.sphere_bound_check(g, sampler, cfg["sphere_draws"],
                                                 derive_stream(cfg["seed"], "diag-sb", mi, sampler))
            psd_rows.append((f"sphere_bound_{sampler}", f"map{mi}(n={n},m={m})",
                             rep.trials, rep.min_lambda, rep.tolerance,
                             len(rep.failures)))
            checks.append((f"sphere_bound_map{mi}_{sampler}", rep.ok,
                           f"min eigenvalue {rep.min_lambda:.3e} vs band {rep.tolerance:.3e}"))
    _write_csv(out_dir / "psd_report.csv",
               ["check", "subject", "trials", "min_lambda", "tolerance",
                "failures"], psd_rows)

    # Compensation-magnitude scans.
    scan_rows = []
    for sigma2 in cfg["case1_sigma2s"]:
        for h_norm in cfg["case1_hnorms"]:
            scan = diagnostics.scan_beta_crosscov_noise(
                sigma2, h_norm, draws=cfg["scan_draws"],
                rng=derive_stream(cfg["seed"], "diag-scan1", sigma2, h_norm))
            expected = sigma2 / h_norm
            step = scan.grid_step_at_argmin()
            ok = abs(scan.argmin_beta - expected) <= step + 1e-12
            scan_rows.append(("crosscov_noise", sigma2, h_norm, 0.0,
                              scan.argmin_beta, expected, step, int(ok)))
            checks.append((f"beta_scan_crosscov_s{sigma2:g}_h{h_norm:g}", ok,
                           f"argmin {scan.argmin_beta:.4g} vs expected {expected:.4g}"))
    scan2 = diagnostics.scan_beta_innovation_noise(
        np.eye(2), draws=cfg["scan_draws"] // 2,
        rng=derive_stream(cfg["seed"], "diag-scan2"))
    step2 = scan2.grid_step_at_argmin()
    ok2 = scan2.argmin_beta >= -step2
    scan_rows.append(("innovation_noise", 0.0, float(np.linalg.norm(np.eye(2))**2),
                      0.0, scan2.argmin_beta, 0.0, step2, int(ok2)))
    checks.append(("beta_scan_innovation", ok2,
                   f"argmin {scan2.argmin_beta:.4g} >= -{step2:.4g}"))
    _write_csv(out_dir / "beta_scan.csv",
               ["case", "sigma2", "h_norm", "beta0", "argmin_beta", "expected",
                "grid_step", "ok"], scan_rows)

    failed = [c for c in checks if not c[1]]
    with open(out_dir / "summary.txt", "w", encoding="utf-8", newline="\n") as fh:
        for name, passed, detail in checks:
            line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
            fh.write(line + "\n")
            print(line)
        verdict = f"{len(checks) - len(failed)}/{len(checks)} checks passed"
        fh.write(verdict + "\n")
        print(verdict)
    return EXIT_OK if not failed else EXIT_INVARIANT


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfcomp",
        description="Nonlinear Kalman filter diagnostics and Monte-Carlo benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("diagnose", "sweep", "demo-scalar", "app"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--runs", type=int, default=None)
        p.add_argument("--paper-parity", action="store_true")
        p.add_argument("--out", type=str, default=None)
    return parser


_COMMANDS = {
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
    "demo-scalar": cmd_demo_scalar,
    "app": cmd_app,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateCase as exc:
        print(f"degenerate scan: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except KfcompError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
