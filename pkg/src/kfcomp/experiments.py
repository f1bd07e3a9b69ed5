"""Monte-Carlo experiments: the scalar noisy-gain demo, filter benchmarks on
the registry applications, and compensation-magnitude sweeps.

Every run draws from its own counter-based random stream keyed by
(model, horizon, run index), so results are bit-identical for a given seed
regardless of worker count, and all (estimator, beta) cells of a sweep see
the same truth trajectories and noises (common random numbers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NonPositiveEntry
from .models import registry_get
from .moments import EstimatorConfig
from .numerics import cholesky, derive_stream

RMSE_FLOOR = 1e-300


def geometric_mean_rmse(series) -> float:
    """exp(mean(log(entries))) across all states and timesteps."""
    vals = np.asarray(series, dtype=float).ravel()
    if np.any(vals <= 0.0) or not np.all(np.isfinite(vals)):
        raise NonPositiveEntry("geometric mean requires strictly positive entries")
    return float(np.exp(np.mean(np.log(vals))))


@dataclass(frozen=True)
class ExperimentSpec:
    """One benchmark request: model, estimators, compensation grid, budget."""

    model: str
    estimators: tuple
    beta_grid: tuple
    runs: int = 2000
    horizon: int | None = None
    seed: int = 0
    recalibrate: bool = True
    backout: bool = True
    use_numba: bool | None = None


@dataclass
class McResult:
    """Aggregated Monte-Carlo output for one (model, estimator, beta) cell."""

    model: str
    kind: str
    beta: float
    runs: int
    horizon: int
    actual_rmse: np.ndarray = field(repr=False)     # (T, n_x)
    estimated_rmse: np.ndarray = field(repr=False)  # (T, n_x)
    actual_geomean: float = np.nan
    estimated_geomean: float = np.nan
    diverged: int = 0
    backed_out_steps: int = 0
    backout_violations: int = 0
    nis_mean: np.ndarray | None = field(default=None, repr=False)  # (T,)

    @property
    def divergence_fraction(self) -> float:
        return self.diverged / self.runs if self.runs else 0.0


def _draw_run_noise(model, horizon, seed, run_idx, cholQ, cholR, cholP0):
    gen = derive_stream(seed, "app", model.name, horizon, run_idx).generator()
    x0 = model.x0_mean + cholP0 @ gen.standard_normal(model.n_x)
    w = gen.standard_normal((horizon, model.n_x)) @ cholQ.T
    v = gen.standard_normal((horizon, model.n_z)) @ cholR.T
    return x0, w, v


def _aggregate(model_name, cfg, runs, horizon, batch):
    err_sq, est_var, nis, backed, diverged, viol = batch
    ok = diverged == 0
    n_ok = int(ok.sum())
    if n_ok:
        actual = np.sqrt(err_sq[ok].mean(axis=0))
        estimated = np.sqrt(np.clip(est_var[ok], 0.0, None).mean(axis=0))
        nis_mean = nis[ok].mean(axis=0)
        a_geo = geometric_mean_rmse(np.maximum(actual, RMSE_FLOOR))
        e_geo = geometric_mean_rmse(np.maximum(estimated, RMSE_FLOOR))
    else:
        actual = np.full(err_sq.shape[1:], np.nan)
        estimated = np.full(err_sq.shape[1:], np.nan)
        nis_mean = np.full(err_sq.shape[1], np.nan)
        a_geo = e_geo = np.nan
    return McResult(
        model=model_name, kind=cfg.label(), beta=float(cfg.beta),
        runs=runs, horizon=horizon,
        actual_rmse=actual, estimated_rmse=estimated,
        actual_geomean=a_geo, estimated_geomean=e_geo,
        diverged=runs - n_ok,
        backed_out_steps=int(backed.sum()),
        backout_violations=int(viol.sum()),
        nis_mean=nis_mean,
    )


def run_application(spec: ExperimentSpec, cfg: EstimatorConfig | None = None) -> McResult:
    """Monte-Carlo benchmark of one estimator on one registry application.

    Truth trajectories are simulated with Gaussian process and measurement
    noise; each run filters the measurement sequence and records squared
    state errors and posterior variances. Diverged runs are excluded from
    the RMSE aggregates and counted.
    """
    cfg = (cfg or spec.estimators[0]).validate()
    model = registry_get(spec.model)
    horizon = spec.horizon or model.default_horizon
    us = np.ascontiguousarray(model.inputs(horizon))
    cholQ = cholesky(model.Q)
    cholR = cholesky(model.R)
    cholP0 = cholesky(model.P0)
    x0_truth = np.empty((spec.runs, model.n_x))
    wn = np.empty((spec.runs, horizon, model.n_x))
    vn = np.empty((spec.runs, horizon, model.n_z))
    for r in range(spec.runs):
        x0_truth[r], wn[r], vn[r] = _draw_run_noise(
            model, horizon, spec.seed, r, cholQ, cholR, cholP0)
    batch = kernels.run_batch(model, cfg, us, x0_truth, wn, vn,
                              recalibrate=spec.recalibrate,
                              backout=spec.backout,
                              use_numba=spec.use_numba)
    return _aggregate(spec.model, cfg, spec.runs, horizon, batch)


def beta_sweep(spec: ExperimentSpec):
    """Run every (estimator, beta) cell of the spec; returns McResult list.

    EKF carries no compensation knob and is run once when present.
    """
    results = []
    for cfg in spec.estimators:
        if cfg.kind == "EKF":
            results.append(run_application(spec, cfg))
            continue
        for beta in spec.beta_grid:
            cell = EstimatorConfig(cfg.kind, beta=float(beta),
                                   ekf2_mode=cfg.ekf2_mode, alpha=cfg.alpha)
            results.append(run_application(spec, cell))
    return results


@dataclass
class ScalarDemoResult:
    """Output of the scalar noisy-gain demo."""

    gamma: float
    beta: float
    runs: int
    horizon: int
    actual_rmse: np.ndarray     # (T,)
    estimated_rmse: np.ndarray  # (T,)

    @property
    def terminal_ratio(self) -> float:
        return float(self.actual_rmse[-1] / self.estimated_rmse[-1])


def run_scalar_demo(gamma: float, beta: float, runs: int = 10000,
                    horizon: int = 200, seed: int = 0) -> ScalarDemoResult:
    """Random-walk scalar system filtered with a noisy measurement gradient.

    Truth follows x_k = x_{k-1} + w (variance 1e-8) observed through
    z = x + v (variance 1e-4); the filter's measurement gradient is drawn
    uniformly from [1-gamma, 1+gamma] each step, and its innovation variance
    is inflated by (1+beta). The posterior variance is propagated with the
    same inflated innovation, so the estimated error reflects what the
    filter believes.
    """
    if not 0.0 <= gamma < 1.0:
        raise NonPositiveEntry(f"gamma must be in [0, 1), got {gamma}")
    if beta < 0.0:
        raise NonPositiveEntry(f"beta must be >= 0, got {beta}")
    q_var, r_var = 1e-8, 1e-4
    gen = derive_stream(seed, "scalar_demo", horizon, runs).generator()
    x_true = gen.standard_normal(runs)  # initial estimate 0, variance 1
    w = np.sqrt(q_var) * gen.standard_normal((runs, horizon))
    v = np.sqrt(r_var) * gen.standard_normal((runs, horizon))
    grad_u = gen.uniform(-1.0, 1.0, (runs, horizon))
    x_hat = np.zeros(runs)
    P = np.ones(runs)
    actual = np.empty(horizon)
    estimated = np.empty(horizon)
    for t in range(horizon):
        x_true = x_true + w[:, t]
        z = x_true + v[:, t]
        P = P + q_var
        Hn = 1.0 + gamma * grad_u[:, t]
        Pxz = P * Hn
        S = (1.0 + beta) * Hn * P * Hn + r_var
        K = Pxz / S
        x_hat = x_hat + K * (z - x_hat)
        P = P + K * K * S - 2.0 * K * Pxz
        actual[t] = np.sqrt(np.mean((x_hat - x_true) ** 2))
        estimated[t] = np.sqrt(np.mean(P))
    return ScalarDemoResult(gamma, beta, runs, horizon, actual, estimated)
