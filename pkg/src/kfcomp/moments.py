"""Moment estimators for standardized nonlinear maps.

Given a map g of a zero-mean, identity-covariance input u, every estimator
returns the same triple: the transformed mean, the transformed covariance,
and the input/output cross-covariance. The covariance estimate of each
family beyond the first-order (EKF) baseline is its compensation matrix,
with a scalar knob ``beta`` scaling the compensation magnitude.

Estimator families
------------------
EKF       first-order: Jacobian only, zero compensation.
EKF2      second-order: Hessian trace mean correction plus a beta-scaled
          compensation (``gaussian`` or ``sphere`` flavor; beta = 2
          reproduces the standard-normal / uniform-on-sphere values).
SKF_STAR  simplex sigma points (n+1), sample moments, plus a beta-scaled
          rank-one compensation.
CKF_STAR  cubature sigma points (2n), same beta extension.
SSKF      scaled simplex (n+2 including a center point); shrinking the
          scaling ``alpha`` approaches a second-order trace form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BetaOutOfRange,
    DimensionMismatch,
    NegativeBeta,
    NotOrthogonal,
    NotQuadratic,
)
from .models import DifferentiableMap, PolynomialMap
from .numerics import cholesky, symmetrize

KINDS = ("EKF", "EKF2", "SKF_STAR", "CKF_STAR", "SSKF")
SIGMA_KINDS = ("SKF", "CKF", "SSKF")


@dataclass(frozen=True)
class MomentEstimate:
    """Estimated mean, covariance, and cross-covariance of z = g(u)."""

    z_mean: np.ndarray   # (m,)
    P_z: np.ndarray      # (m, m) symmetric
    P_xz: np.ndarray     # (n, m)


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run and how much compensation to apply."""

    kind: str
    beta: float = 0.0
    ekf2_mode: str = "gaussian"
    alpha: float = 1e-3

    def validate(self):
        if self.kind not in KINDS:
            raise BetaOutOfRange(f"unknown estimator kind {self.kind!r}")
        if self.kind in ("EKF2", "SSKF") and self.beta < 0:
            raise NegativeBeta(
                f"{self.kind} requires beta >= 0 to keep the compensation PSD, "
                f"got {self.beta}"
            )
        if self.kind in ("SKF_STAR", "CKF_STAR") and self.beta < -1:
            raise BetaOutOfRange(
                f"{self.kind} requires beta >= -1 to keep the estimated "
                f"covariance PSD, got {self.beta}"
            )
        if self.kind == "SSKF" and not 0.0 < self.alpha <= 1.0:
            raise BetaOutOfRange(f"SSKF scaling must be in (0, 1], got {self.alpha}")
        if self.kind == "EKF2" and self.ekf2_mode not in ("gaussian", "sphere"):
            raise BetaOutOfRange(f"unknown EKF2 mode {self.ekf2_mode!r}")
        return self

    def label(self) -> str:
        if self.kind == "EKF":
            return "EKF"
        if self.kind == "EKF2":
            return f"EKF2[{self.ekf2_mode}]"
        return {"SKF_STAR": "SKF*", "CKF_STAR": "CKF*", "SSKF": "SSKF"}[self.kind]


@dataclass(frozen=True)
class SigmaPointSet:
    """Discrete zero-mean, identity-covariance point set with weights."""

    points: np.ndarray   # (N, n)
    weights: np.ndarray  # (N,)
    kind: str
    alpha: float | None = None

    def moment_defects(self):
        """(|sum w - 1|, max |sum w xi|, max |sum w xi xi^T - I|)."""
        w, pts = self.weights, self.points
        mean = w @ pts
        cov = (pts.T * w) @ pts
        return (
            abs(float(w.sum()) - 1.0),
            float(np.abs(mean).max()),
            float(np.abs(cov - np.eye(pts.shape[1])).max()),
        )


def simplex_base(n: int) -> np.ndarray:
    """The n+1 simplex directions used by SKF/SSKF, rows of shape (n+1, n).

    Offset per coordinate is 1/(sqrt(n+1) - 1), which makes the uniformly
    weighted set match zero mean and identity covariance exactly; the last
    point lands on the all-ones vector.
    """
    off = 1.0 / (np.sqrt(n + 1.0) - 1.0)
    pts = np.empty((n + 1, n))
    pts[:n] = np.sqrt(n + 1.0) * np.eye(n) - off
    pts[n] = 1.0
    return pts


def sigma_points(kind: str, n: int, alpha: float = 1.0) -> SigmaPointSet:
    """Sigma points for the requested rule (SKF, CKF, or SSKF).

    SKF uses the n+1 simplex, CKF the 2n symmetric axis set, and SSKF the
    alpha-scaled simplex plus a center point whose weight brings the total
    back to one.
    """
    if kind not in SIGMA_KINDS:
        raise BetaOutOfRange(f"unknown sigma rule {kind!r}")
    if n < 1:
        raise DimensionMismatch("dimension must be >= 1")
    if kind == "SKF":
        return SigmaPointSet(simplex_base(n), np.full(n + 1, 1.0 / (n + 1)), kind)
    if kind == "CKF":
        pts = np.vstack([np.sqrt(n) * np.eye(n), -np.sqrt(n) * np.eye(n)])
        return SigmaPointSet(pts, np.full(2 * n, 1.0 / (2 * n)), kind)
    if not 0.0 < alpha <= 1.0:
        raise BetaOutOfRange(f"SSKF scaling must be in (0, 1], got {alpha}")
    base = simplex_base(n)
    pts = np.vstack([alpha * base, np.zeros((1, n))])
    w = np.empty(n + 2)
    w[: n + 1] = 1.0 / ((n + 1) * alpha**2)
    w[n + 1] = 1.0 - w[: n + 1].sum()  # exact complement, stable for tiny alpha
    return SigmaPointSet(pts, w, kind, alpha)


def standardize(x_mean, P_x, f: DifferentiableMap):
    """Re-center f on a unit-covariance input: g(u) = f(x_mean + L u).

    Returns (g, L) with L the Cholesky factor of P_x. Estimates made in
    u-space map back to x-space via P_xz_x = L @ P_xz_u; the mean and
    output covariance are unchanged.
    """
    x_mean = np.asarray(x_mean, dtype=float)
    L = cholesky(P_x)
    return f.affine_pullback(x_mean, L), L


def rotate_map(g: DifferentiableMap, A) -> DifferentiableMap:
    """The composition u -> g(A u) for orthogonal A."""
    A = np.asarray(A, dtype=float)
    if A.shape != (g.n, g.n):
        raise DimensionMismatch(f"rotation shape {A.shape} does not match map input {g.n}")
    if np.linalg.norm(A @ A.T - np.eye(g.n)) > 1e-10:
        raise NotOrthogonal("matrix is not orthogonal to 1e-10")
    return g.affine_pullback(np.zeros(g.n), A)


def estimate_ekf(g: DifferentiableMap) -> MomentEstimate:
    """First-order estimate: curvature is invisible."""
    u0 = np.zeros(g.n)
    J = g.jacobian(u0)
    return MomentEstimate(g(u0), symmetrize(J @ J.T), J.T.copy())


def _hess_gram(H: np.ndarray) -> np.ndarray:
    # tr(H_i H_j) for symmetric slices == full elementwise contraction.
    return np.einsum("iab,jab->ij", H, H)


def sphere_compensation(H: np.ndarray) -> np.ndarray:
    """Covariance of the quadratic part under a uniform-on-sphere input.

    For inputs distributed uniformly on the sphere of squared radius n,
    the quadratic residual 1/2 u^T H_i u has covariance
    n * (tr(H_i H_j) - tr(H_i) tr(H_j) / n) / (2 (n + 2)); identically zero
    when n == 1 since the quadratic is constant on {-1, +1}.
    """
    n = H.shape[1]
    tr = np.trace(H, axis1=1, axis2=2)
    return (n * (_hess_gram(H) - np.outer(tr, tr) / n)) / (2.0 * (n + 2.0))


def estimate_ekf2(g: DifferentiableMap, beta: float, mode: str = "gaussian") -> MomentEstimate:
    """Second-order estimate with beta-scaled compensation.

    ``gaussian`` compensation is (beta/4) tr(H_i H_j); ``sphere`` scales the
    uniform-on-sphere covariance linearly in beta. Both reproduce their
    exact distributional value at beta = 2.
    """
    if beta < 0:
        raise NegativeBeta(f"EKF2 requires beta >= 0, got {beta}")
    if mode not in ("gaussian", "sphere"):
        raise BetaOutOfRange(f"unknown EKF2 mode {mode!r}")
    u0 = np.zeros(g.n)
    J = g.jacobian(u0)
    H = g.hessians(u0)
    tr = np.trace(H, axis1=1, axis2=2)
    z = g(u0) + 0.5 * tr
    if mode == "gaussian":
        comp = (beta / 4.0) * _hess_gram(H)
    else:
        comp = (beta / 2.0) * sphere_compensation(H)
    return MomentEstimate(z, symmetrize(J @ J.T + comp), J.T.copy())


def estimate_sigma(g: DifferentiableMap, cfg: EstimatorConfig) -> MomentEstimate:
    """Sigma-point estimate for SKF*, CKF*, or SSKF."""
    cfg.validate()
    if cfg.kind not in ("SKF_STAR", "CKF_STAR", "SSKF"):
        raise BetaOutOfRange(f"estimate_sigma got non-sigma kind {cfg.kind!r}")
    n = g.n
    g0 = g(np.zeros(n))
    if cfg.kind == "SSKF":
        base = simplex_base(n)
        # Deviation form: weights grow like 1/alpha^2, so accumulate the
        # covariance from per-point deviations and fold the center point and
        # the rank-one term in analytically. Avoids catastrophic cancellation
        # for tiny alpha.
        wj = 1.0 / ((n + 1) * cfg.alpha**2)
        D = g.eval_rows(cfg.alpha * base) - g0
        mu = wj * D.sum(axis=0)
        z = g0 + mu
        P_z = wj * (D.T @ D) + (cfg.beta - cfg.alpha**2) * np.outer(mu, mu)
        P_xz = cfg.alpha * wj * (base.T @ D - np.outer(base.sum(axis=0), mu))
        return MomentEstimate(z, symmetrize(P_z), P_xz)
    rule = "SKF" if cfg.kind == "SKF_STAR" else "CKF"
    pset = sigma_points(rule, n)
    Y = g.eval_rows(pset.points)
    w = pset.weights
    z = w @ Y
    d = Y - z
    P_z = (d.T * w) @ d + cfg.beta * np.outer(g0 - z, g0 - z)
    P_xz = (pset.points.T * w) @ d
    return MomentEstimate(z, symmetrize(P_z), P_xz)


def run_estimator(g: DifferentiableMap, cfg: EstimatorConfig) -> MomentEstimate:
    """Dispatch a moment estimate for any configured estimator."""
    cfg.validate()
    if cfg.kind == "EKF":
        return estimate_ekf(g)
    if cfg.kind == "EKF2":
        return estimate_ekf2(g, cfg.beta, cfg.ekf2_mode)
    return estimate_sigma(g, cfg)


def compensation(est: MomentEstimate, g: DifferentiableMap) -> np.ndarray:
    """Estimated covariance minus the first-order baseline, symmetrized."""
    J = g.jacobian(np.zeros(g.n))
    return symmetrize(est.P_z - J @ J.T)


def _require_quadratic(g) -> PolynomialMap:
    if not isinstance(g, PolynomialMap) or g.analytic_degree not in (1, 2) or np.any(g.C3):
        raise NotQuadratic("operation requires an exactly quadratic map")
    return g


def sskf_limit_target(g, beta: float) -> MomentEstimate:
    """Closed-form trace estimate that SSKF approaches as alpha -> 0.

    Mean picks up half the Hessian traces; the covariance compensation is
    (beta/4) tr(H_i) tr(H_j); the cross-covariance stays first-order.
    """
    q = _require_quadratic(g)
    tr = np.trace(q.H, axis1=1, axis2=2)
    z = q.c + 0.5 * tr
    P_z = q.A @ q.A.T + (beta / 4.0) * np.outer(tr, tr)
    return MomentEstimate(z, symmetrize(P_z), q.A.T.copy())


@dataclass
class SskfLimitReport:
    """Per-alpha deviation of SSKF from its small-alpha closed form."""

    alphas: np.ndarray
    z_errors: np.ndarray
    pz_errors: np.ndarray
    pxz_errors: np.ndarray
    target: MomentEstimate = field(repr=False)

    def converged(self) -> bool:
        return bool(self.pz_errors[-1] <= self.pz_errors[0] + 1e-12)


def sskf_limit_check(g, beta: float, alpha_sequence) -> SskfLimitReport:
    """Evaluate SSKF along a decreasing alpha sequence against the target."""
    target = sskf_limit_target(g, beta)
    alphas = np.asarray(alpha_sequence, dtype=float)
    if np.any(np.diff(alphas) >= 0):
        raise BetaOutOfRange("alpha sequence must be strictly decreasing")
    z_err = np.empty(alphas.shape)
    pz_err = np.empty(alphas.shape)
    pxz_err = np.empty(alphas.shape)
    for i, a in enumerate(alphas):
        est = estimate_sigma(g, EstimatorConfig("SSKF", beta=beta, alpha=a))
        z_err[i] = np.abs(est.z_mean - target.z_mean).max()
        pz_err[i] = np.abs(est.P_z - target.P_z).max()
        pxz_err[i] = np.abs(est.P_xz - target.P_xz).max()
    return SskfLimitReport(alphas, z_err, pz_err, pxz_err, target)
