"""Four-step filter loop: predict, update, recalibrate, back out.

The loop is generic over any configured moment estimator. ``update`` only
moves the state mean; the posterior covariance is owned by ``recalibrate``,
which re-estimates the measurement moments at the updated mean (still using
the predicted covariance), and by ``back_out``, which reverts the whole
step when the posterior trace grew. With recalibration disabled the loop
reduces to the conventional predict/update form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import SingularInnovation
from .models import SystemModel
from .moments import EstimatorConfig, run_estimator, standardize
from .numerics import symmetrize


@dataclass(frozen=True)
class Belief:
    """State mean and covariance."""

    x: np.ndarray
    P: np.ndarray


@dataclass(frozen=True)
class FilterConfig:
    estimator: EstimatorConfig
    recalibrate_enabled: bool = True
    backout_enabled: bool = True


@dataclass(frozen=True)
class StepTrace:
    """Per-step internals: predicted measurement, innovation covariances
    before/after recalibration, gain, NIS, and whether the step backed out."""

    z_pred: np.ndarray
    S_pre: np.ndarray
    S_post: np.ndarray | None
    K: np.ndarray
    nis: float
    backed_out: bool = False


def _chol_spd(S: np.ndarray):
    """Cholesky of an innovation covariance with one jitter retry."""
    S = symmetrize(S)
    try:
        return scipy.linalg.cho_factor(S, lower=True)
    except scipy.linalg.LinAlgError:
        pass
    jitter = 1e-12 * (1.0 + abs(float(np.trace(S))) / S.shape[0])
    try:
        return scipy.linalg.cho_factor(S + jitter * np.eye(S.shape[0]), lower=True)
    except scipy.linalg.LinAlgError:
        raise SingularInnovation(
            "innovation covariance is singular; measurement noise too small "
            "or predicted covariance collapsed"
        ) from None


def predict(b: Belief, model: SystemModel, u, cfg: FilterConfig) -> Belief:
    """Propagate the belief through the transition map and add process noise."""
    g, _ = standardize(b.x, b.P, model.transition(u))
    est = run_estimator(g, cfg.estimator)
    return Belief(est.z_mean, symmetrize(est.P_z + model.Q))


def update(b_pred: Belief, model: SystemModel, z, cfg: FilterConfig):
    """Measurement update of the mean only; covariance waits for recalibrate.

    Returns the mean-updated belief and a partial trace (gain, pre-update
    innovation covariance, NIS). The gain solve goes through a Cholesky
    factorization of S, never an explicit inverse.
    """
    z = np.asarray(z, dtype=float)
    g, L = standardize(b_pred.x, b_pred.P, model.measurement)
    est = run_estimator(g, cfg.estimator)
    P_xz = L @ est.P_xz
    S_pre = symmetrize(est.P_z + model.R)
    cho = _chol_spd(S_pre)
    K = scipy.linalg.cho_solve(cho, P_xz.T).T
    r = z - est.z_mean
    nis = float(r @ scipy.linalg.cho_solve(cho, r))
    b_upd = Belief(b_pred.x + K @ r, b_pred.P)
    return b_upd, StepTrace(est.z_mean, S_pre, None, K, nis)


def recalibrate(b_pred: Belief, b_updated: Belief, model: SystemModel, K,
                cfg: FilterConfig, trace: StepTrace):
    """Posterior covariance from moments re-estimated at the updated mean.

    Uses the predicted covariance for the re-standardization. When
    recalibration is disabled the predicted-point moments are reused, which
    reproduces the conventional posterior covariance.
    """
    if cfg.recalibrate_enabled:
        g, L = standardize(b_updated.x, b_pred.P, model.measurement)
        est = run_estimator(g, cfg.estimator)
        P_xz = L @ est.P_xz
        S_post = symmetrize(est.P_z + model.R)
    else:
        S_post = trace.S_pre
        P_xz = K @ trace.S_pre  # gain solve inverted: K S_pre == P_xz,pre
    P = b_pred.P + K @ S_post @ K.T - P_xz @ K.T - K @ P_xz.T
    b_post = Belief(b_updated.x, symmetrize(P))
    return b_post, replace(trace, S_post=S_post)


def back_out(b_pred: Belief, b_post: Belief, trace: StepTrace, cfg: FilterConfig):
    """Revert to the prior belief when the update grew the trace."""
    if cfg.backout_enabled and float(np.trace(b_post.P)) > float(np.trace(b_pred.P)):
        return b_pred, replace(trace, backed_out=True)
    return b_post, trace


def step(b: Belief, model: SystemModel, u, z, cfg: FilterConfig):
    """One full predict/update/recalibrate/back-out cycle."""
    b_pred = predict(b, model, u, cfg)
    b_upd, trace = update(b_pred, model, z, cfg)
    b_post, trace = recalibrate(b_pred, b_upd, model, trace.K, cfg, trace)
    return back_out(b_pred, b_post, trace, cfg)


def run_filter(model: SystemModel, b0: Belief, us, zs, cfg: FilterConfig):
    """Filter a whole measurement sequence; returns beliefs and traces."""
    us = np.asarray(us, dtype=float)
    zs = np.asarray(zs, dtype=float)
    beliefs = []
    traces = []
    b = b0
    for t in range(zs.shape[0]):
        b, trace = step(b, model, us[t], zs[t], cfg)
        beliefs.append(b)
        traces.append(trace)
    return beliefs, traces
