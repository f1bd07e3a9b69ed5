"""Nonlinear maps, dynamic-system models, and the built-in registry.

Two map flavors share one interface: :class:`DifferentiableMap` wraps an
arbitrary callable (derivatives analytic if supplied, finite differences
otherwise), while :class:`PolynomialMap` stores coefficients of a degree
<= 3 polynomial and differentiates exactly. Both support ``affine_pullback``
so the moment estimators can re-center and re-scale them without losing
analytic derivatives.

Registry ``SystemModel`` entries also carry plain-function forms of the
transition and measurement (``f_raw(x, u)`` / ``h_raw(x, u)``) that the
JIT-compiled trajectory kernels can consume directly.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, NonFiniteEvaluation, UnknownModel
from .numerics import JAC_STEP, HESS_STEP, fd_hessians, fd_jacobian, symmetrize


class DifferentiableMap:
    """Vector-valued map R^n -> R^m with on-demand derivatives.

    Parameters
    ----------
    n, m : input and output dimensions.
    fn : callable mapping a length-n vector to a length-m vector.
    jac : optional callable x -> (m, n) Jacobian.
    hess : optional callable x -> (m, n, n) stack of Hessians.
    analytic_degree : polynomial degree when the map is exactly polynomial
        (2 for quadratic); None for general maps.
    """

    def __init__(self, n, m, fn, jac=None, hess=None, analytic_degree=None,
                 jac_step=JAC_STEP, hess_step=HESS_STEP):
        self.n = int(n)
        self.m = int(m)
        self.fn = fn
        self.jac = jac
        self.hess = hess
        self.analytic_degree = analytic_degree
        self.jac_step = jac_step
        self.hess_step = hess_step

    def __call__(self, x):
        z = np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)
        if not np.all(np.isfinite(z)):
            raise NonFiniteEvaluation(f"map returned non-finite values at x={x!r}")
        return z

    def eval_rows(self, X):
        """Evaluate on each row of X, returning shape (len(X), m)."""
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[0], self.m))
        for i in range(X.shape[0]):
            out[i] = self(X[i])
        return out

    def jacobian(self, x):
        if self.jac is not None:
            return np.asarray(self.jac(np.asarray(x, dtype=float)), dtype=float)
        return fd_jacobian(self, x, self.jac_step)

    def hessians(self, x):
        if self.hess is not None:
            return np.asarray(self.hess(np.asarray(x, dtype=float)), dtype=float)
        return fd_hessians(self, x, self.hess_step)

    def affine_pullback(self, center, T):
        """Map u -> self(center + T @ u), with chain-ruled derivatives."""
        center = np.asarray(center, dtype=float)
        T = np.asarray(T, dtype=float)
        if center.shape != (self.n,) or T.shape[0] != self.n:
            raise DimensionMismatch("pullback center/matrix shapes do not match map input")
        base = self

        def fn(u):
            return base.fn(center + T @ u)

        jac = None
        if base.jac is not None:
            jac = lambda u: base.jacobian(center + T @ u) @ T
        hess = None
        if base.hess is not None:
            hess = lambda u: np.einsum("an,iab,bm->inm", T, base.hessians(center + T @ u), T)
        return DifferentiableMap(
            T.shape[1], self.m, fn, jac=jac, hess=hess,
            analytic_degree=self.analytic_degree,
            jac_step=self.jac_step, hess_step=self.hess_step,
        )

    def self_test(self, rng, points=100, radius=2.0, rtol=1e-5):
        """Compare analytic derivatives against finite differences.

        Returns the maximum relative error seen over random points; parts
        without analytic derivatives are skipped.
        """
        gen = rng.generator() if hasattr(rng, "generator") else rng
        worst = 0.0
        for _ in range(points):
            x = gen.standard_normal(self.n) * radius / max(1.0, math.sqrt(self.n))
            if self.jac is not None:
                Ja = self.jacobian(x)
                Jf = fd_jacobian(self, x, self.jac_step)
                worst = max(worst, np.abs(Ja - Jf).max() / (1.0 + np.abs(Ja).max()))
            if self.hess is not None:
                Ha = self.hessians(x)
                Hf = fd_hessians(self, x, self.hess_step)
                worst = max(worst, np.abs(Ha - Hf).max() / (1.0 + np.abs(Ha).max()))
        if worst > rtol:
            raise NonFiniteEvaluation(
                f"analytic derivatives disagree with finite differences: {worst:.2e}"
            )
        return worst


class PolynomialMap(DifferentiableMap):
    """Polynomial map of degree <= 3 with exact derivatives.

    f_i(x) = c_i + (A x)_i + 1/2 x^T H_i x + 1/6 sum C3_i[a,b,c] x_a x_b x_c
    with H_i symmetric and C3_i fully symmetric.
    """

    def __init__(self, c, A, H=None, C3=None):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        A = np.asarray(A, dtype=float)
        m, n = A.shape
        if c.shape != (m,):
            raise DimensionMismatch(f"constant term has shape {c.shape}, expected ({m},)")
        if H is None:
            H = np.zeros((m, n, n))
        H = np.asarray(H, dtype=float)
        if H.shape != (m, n, n):
            raise DimensionMismatch(f"Hessian stack has shape {H.shape}, expected {(m, n, n)}")
        if np.abs(H - H.transpose(0, 2, 1)).max() > 1e-12 * (1.0 + np.abs(H).max()):
            raise DimensionMismatch("Hessian slices must be symmetric")
        H = 0.5 * (H + H.transpose(0, 2, 1))
        if C3 is None:
            C3 = np.zeros((m, n, n, n))
        C3 = np.asarray(C3, dtype=float)
        self.c = c
        self.A = A
        self.H = H
        self.C3 = C3
        degree = 1
        if np.any(H):
            degree = 2
        if np.any(C3):
            degree = 3
        super().__init__(n, m, self._eval_one, jac=self._jac, hess=self._hess,
                         analytic_degree=degree)

    def _eval_one(self, x):
        return self.eval_rows(x[None, :])[0]

    def eval_rows(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = self.c + X @ self.A.T
        out += 0.5 * np.einsum("ka,iab,kb->ki", X, self.H, X, optimize=True)
        if np.any(self.C3):
            out += np.einsum("ka,iabc,kb,kc->ki", X, self.C3, X, X, optimize=True) / 6.0
        return out

    def _jac(self, x):
        J = self.A + np.einsum("iab,b->ia", self.H, x)
        if np.any(self.C3):
            J += 0.5 * np.einsum("iabc,b,c->ia", self.C3, x, x)
        return J

    def _hess(self, x):
        H = self.H.copy()
        if np.any(self.C3):
            H += np.einsum("iabc,c->iab", self.C3, x)
        return H

    def affine_pullback(self, center, T):
        center = np.asarray(center, dtype=float)
        T = np.asarray(T, dtype=float)
        if center.shape != (self.n,) or T.shape[0] != self.n:
            raise DimensionMismatch("pullback center/matrix shapes do not match map input")
        # Shift to the new center, then contract every slot with T.
        c = self._eval_one(center)
        A = self._jac(center)
        H = self._hess(center)
        A2 = A @ T
        H2 = np.einsum("an,iab,bm->inm", T, H, T, optimize=True)
        C32 = None
        if np.any(self.C3):
            C32 = np.einsum("iabc,an,bp,cq->inpq", self.C3, T, T, T, optimize=True)
        return PolynomialMap(c, A2, H2, C32)


def make_quadratic(c, A, H) -> PolynomialMap:
    """Exactly quadratic map from constant, linear, and Hessian coefficients."""
    pm = PolynomialMap(c, A, H)
    pm.analytic_degree = 2
    return pm


def random_polynomial_map(n, m, degree, scale, rng) -> PolynomialMap:
    """Random polynomial map with i.i.d. normal coefficients (std = scale).

    degree in {1, 2, 3}; Hessian and cubic tensors are symmetrized after
    drawing so the analytic derivatives are exact.
    """
    if degree not in (1, 2, 3):
        raise DimensionMismatch(f"degree must be 1, 2, or 3, got {degree}")
    gen = rng.generator() if hasattr(rng, "generator") else rng
    c = gen.standard_normal(m) * scale
    A = gen.standard_normal((m, n)) * scale
    H = None
    C3 = None
    if degree >= 2:
        H = gen.standard_normal((m, n, n)) * scale
        H = 0.5 * (H + H.transpose(0, 2, 1))
    if degree >= 3:
        C3 = gen.standard_normal((m, n, n, n)) * scale
        C3 = (
            C3
            + C3.transpose(0, 1, 3, 2)
            + C3.transpose(0, 2, 1, 3)
            + C3.transpose(0, 2, 3, 1)
            + C3.transpose(0, 3, 1, 2)
            + C3.transpose(0, 3, 2, 1)
        ) / 6.0
    return PolynomialMap(c, A, H, C3)


class SystemModel:
    """Discrete-time system x' = f(x, u) + w, z = h(x) + v.

    ``transition(u)`` returns the transition as a map of x alone;
    ``measurement`` is the measurement map. ``f_raw``/``h_raw`` are the
    plain-function forms used by the compiled kernels (both take ``(x, u)``;
    measurement functions ignore ``u``).
    """

    def __init__(self, name, n_x, n_z, n_u, transition, measurement, Q, R,
                 x0_mean, P0, default_horizon, input_fn, f_raw, h_raw):
        self.name = name
        self.n_x = n_x
        self.n_z = n_z
        self.n_u = n_u
        self.transition = transition
        self.measurement = measurement
        self.Q = symmetrize(np.asarray(Q, dtype=float))
        self.R = symmetrize(np.asarray(R, dtype=float))
        self.x0_mean = np.asarray(x0_mean, dtype=float)
        self.P0 = symmetrize(np.asarray(P0, dtype=float))
        self.default_horizon = default_horizon
        self._input_fn = input_fn
        self.f_raw = f_raw
        self.h_raw = h_raw
        if self.Q.shape != (n_x, n_x) or self.R.shape != (n_z, n_z):
            raise DimensionMismatch(f"noise covariances inconsistent for model {name}")
        if self.x0_mean.shape != (n_x,) or self.P0.shape != (n_x, n_x):
            raise DimensionMismatch(f"initial belief inconsistent for model {name}")

    def inputs(self, horizon=None):
        """Deterministic input sequence, shape (horizon, n_u)."""
        T = self.default_horizon if horizon is None else int(horizon)
        return self._input_fn(T)


# ---------------------------------------------------------------------------
# Built-in registry
# ---------------------------------------------------------------------------

_TRACK_DT = 1.0
_TRACK_ANCHOR1 = np.array([0.0, 0.0, 0.0])
_TRACK_ANCHOR2 = np.array([40.0, 10.0, 0.0])


def _tracking_f_raw(x, u):
    out = np.empty(6)
    out[0] = x[0] + _TRACK_DT * x[3] + 0.5 * _TRACK_DT * _TRACK_DT * u[0]
    out[1] = x[1] + _TRACK_DT * x[4] + 0.5 * _TRACK_DT * _TRACK_DT * u[1]
    out[2] = x[2] + _TRACK_DT * x[5] + 0.5 * _TRACK_DT * _TRACK_DT * u[2]
    out[3] = x[3] + _TRACK_DT * u[0]
    out[4] = x[4] + _TRACK_DT * u[1]
    out[5] = x[5] + _TRACK_DT * u[2]
    return out


def _tracking_h_raw(x, u):
    out = np.empty(2)
    d1 = 0.0
    d2 = 0.0
    for i in range(3):
        d1 += (x[i] - _TRACK_ANCHOR1[i]) ** 2
        d2 += (x[i] - _TRACK_ANCHOR2[i]) ** 2
    out[0] = np.sqrt(d1)
    out[1] = np.sqrt(d2)
    return out


def _tracking_h_jac(x):
    J = np.zeros((2, 6))
    for row, anchor in enumerate((_TRACK_ANCHOR1, _TRACK_ANCHOR2)):
        r = x[:3] - anchor
        J[row, :3] = r / np.linalg.norm(r)
    return J


def _tracking_h_hess(x):
    H = np.zeros((2, 6, 6))
    for row, anchor in enumerate((_TRACK_ANCHOR1, _TRACK_ANCHOR2)):
        r = x[:3] - anchor
        d = np.linalg.norm(r)
        rhat = r / d
        H[row, :3, :3] = (np.eye(3) - np.outer(rhat, rhat)) / d
    return H


def _tracking_inputs(T):
    t = np.arange(T, dtype=float)
    return np.column_stack([
        0.10 * np.sin(0.2 * t),
        0.10 * np.cos(0.2 * t),
        -0.05 * np.sin(0.1 * t),
    ])


def _build_tracking3d():
    F = np.block([[np.eye(3), _TRACK_DT * np.eye(3)],
                  [np.zeros((3, 3)), np.eye(3)]])
    B = np.vstack([0.5 * _TRACK_DT**2 * np.eye(3), _TRACK_DT * np.eye(3)])

    def transition(u):
        return PolynomialMap(B @ np.asarray(u, float), F)

    measurement = DifferentiableMap(6, 2, lambda x: _tracking_h_raw(x, None),
                                    jac=_tracking_h_jac, hess=_tracking_h_hess)
    # Process noise from white acceleration disturbance, std 0.01 per axis.
    qa = 1e-4
    Qblk = np.block([
        [qa * _TRACK_DT**4 / 4 * np.eye(3), qa * _TRACK_DT**3 / 2 * np.eye(3)],
        [qa * _TRACK_DT**3 / 2 * np.eye(3), qa * _TRACK_DT**2 * np.eye(3)],
    ])
    return SystemModel(
        name="tracking3d", n_x=6, n_z=2, n_u=3,
        transition=transition, measurement=measurement,
        Q=Qblk, R=1e-4 * np.eye(2),
        x0_mean=np.array([20.0, -12.0, 8.0, 1.0, -0.5, 0.3]),
        P0=np.diag([0.5, 0.5, 0.5, 0.04, 0.04, 0.04]),
        default_horizon=30, input_fn=_tracking_inputs,
        f_raw=_tracking_f_raw, h_raw=_tracking_h_raw,
    )


def _terrain_f_raw(x, u):
    out = np.empty(2)
    out[0] = x[0] + u[0]
    out[1] = x[1] + u[1]
    return out


def _terrain_h_raw(x, u):
    out = np.empty(1)
    out[0] = 20.0 * np.sin(0.1 * x[0]) * np.cos(0.13 * x[1]) \
        + 10.0 * np.sin(0.07 * x[0] + 0.05 * x[1])
    return out


def _terrain_h_jac(x):
    s = 0.07 * x[0] + 0.05 * x[1]
    return np.array([[
        2.0 * np.cos(0.1 * x[0]) * np.cos(0.13 * x[1]) + 0.7 * np.cos(s),
        -2.6 * np.sin(0.1 * x[0]) * np.sin(0.13 * x[1]) + 0.5 * np.cos(s),
    ]])


def _terrain_h_hess(x):
    s = 0.07 * x[0] + 0.05 * x[1]
    hxx = -0.20 * np.sin(0.1 * x[0]) * np.cos(0.13 * x[1]) - 0.049 * np.sin(s)
    hxy = -0.26 * np.cos(0.1 * x[0]) * np.sin(0.13 * x[1]) - 0.035 * np.sin(s)
    hyy = -0.338 * np.sin(0.1 * x[0]) * np.cos(0.13 * x[1]) - 0.025 * np.sin(s)
    return np.array([[[hxx, hxy], [hxy, hyy]]])


def _terrain_inputs(T):
    t = np.arange(T, dtype=float)
    return np.column_stack([
        1.5 + 0.5 * np.cos(0.04 * t),
        1.0 + 0.5 * np.sin(0.03 * t),
    ])


def _build_terrain_nav():
    def transition(u):
        return PolynomialMap(np.asarray(u, float), np.eye(2))

    measurement = DifferentiableMap(2, 1, lambda x: _terrain_h_raw(x, None),
                                    jac=_terrain_h_jac, hess=_terrain_h_hess)
    return SystemModel(
        name="terrain_nav", n_x=2, n_z=1, n_u=2,
        transition=transition, measurement=measurement,
        Q=0.25 * np.eye(2), R=np.array([[1.0]]),
        x0_mean=np.array([10.0, 15.0]),
        P0=np.diag([9.0, 9.0]),
        default_horizon=100, input_fn=_terrain_inputs,
        f_raw=_terrain_f_raw, h_raw=_terrain_h_raw,
    )


# Fourth-order two-axis synchronous generator against an infinite bus.
# States: rotor angle [rad], speed deviation [pu], q- and d-axis transient
# EMFs [pu]. Inputs: mechanical power, field voltage, bus voltage [pu].
_GEN_OMEGA = 2.0 * np.pi * 60.0
_GEN_H = 3.5
_GEN_D = 2.0
_GEN_TDO = 8.0
_GEN_TQO = 0.8
_GEN_XD = 1.81
_GEN_XDP = 0.30
_GEN_XQ = 1.76
_GEN_XQP = 0.65
_GEN_XE = 0.35
_GEN_DT = 0.01


def _gen4_f_raw(x, u):
    # Self-contained (closure only) so the JIT path can compile it directly.
    def deriv(s):
        i_d = (s[2] - u[2] * np.cos(s[0])) / (_GEN_XDP + _GEN_XE)
        i_q = (u[2] * np.sin(s[0]) + s[3]) / (_GEN_XQP + _GEN_XE)
        pe = s[2] * i_q + s[3] * i_d + (_GEN_XQP - _GEN_XDP) * i_d * i_q
        out = np.empty(4)
        out[0] = _GEN_OMEGA * s[1]
        out[1] = (u[0] - pe - _GEN_D * s[1]) / (2.0 * _GEN_H)
        out[2] = (u[1] - s[2] - (_GEN_XD - _GEN_XDP) * i_d) / _GEN_TDO
        out[3] = (-s[3] + (_GEN_XQ - _GEN_XQP) * i_q) / _GEN_TQO
        return out

    k1 = deriv(x)
    k2 = deriv(x + 0.5 * _GEN_DT * k1)
    k3 = deriv(x + 0.5 * _GEN_DT * k2)
    k4 = deriv(x + _GEN_DT * k3)
    return x + _GEN_DT / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _gen4_h_raw(x, u):
    out = np.empty(1)
    v = 1.0
    i_d = (x[2] - v * np.cos(x[0])) / (_GEN_XDP + _GEN_XE)
    i_q = (v * np.sin(x[0]) + x[3]) / (_GEN_XQP + _GEN_XE)
    out[0] = x[2] * i_q + x[3] * i_d + (_GEN_XQP - _GEN_XDP) * i_d * i_q
    return out


def _gen4_inputs(T):
    t = np.arange(T, dtype=float)
    return np.column_stack([
        0.80 + 0.05 * np.sin(0.05 * t),
        1.80 * np.ones(T),
        np.ones(T),
    ])


def _build_generator4():
    def transition(u):
        uu = np.asarray(u, dtype=float)
        return DifferentiableMap(4, 4, lambda x: _gen4_f_raw(x, uu))

    measurement = DifferentiableMap(4, 1, lambda x: _gen4_h_raw(x, None))
    return SystemModel(
        name="generator4", n_x=4, n_z=1, n_u=3,
        transition=transition, measurement=measurement,
        Q=np.diag([1e-8, 1e-8, 1e-8, 1e-8]),
        R=np.array([[1e-8]]),
        x0_mean=np.array([0.9, 0.0, 1.05, 0.45]),
        P0=np.diag([0.25, 1e-6, 0.02, 0.02]),
        default_horizon=100, input_fn=_gen4_inputs,
        f_raw=_gen4_f_raw, h_raw=_gen4_h_raw,
    )


def _scalar_f_raw(x, u):
    return x.copy()


def _scalar_h_raw(x, u):
    return x.copy()


def _build_scalar_demo():
    def transition(u):
        return PolynomialMap(np.zeros(1), np.eye(1))

    measurement = PolynomialMap(np.zeros(1), np.eye(1))
    return SystemModel(
        name="scalar_demo", n_x=1, n_z=1, n_u=0,
        transition=transition, measurement=measurement,
        Q=np.array([[1e-8]]), R=np.array([[1e-4]]),
        x0_mean=np.zeros(1), P0=np.eye(1),
        default_horizon=200, input_fn=lambda T: np.zeros((T, 0)),
        f_raw=_scalar_f_raw, h_raw=_scalar_h_raw,
    )


def _build_fig2_map():
    # Planar single-output quadratic with a nonzero linear part and
    # anisotropic curvature, so simplex/cubature estimates visibly depend
    # on the input orientation while derivative-based ones do not.
    return make_quadratic(
        np.zeros(1),
        np.array([[1.0, 0.0]]),
        np.array([[[1.6, 0.6], [0.6, -0.8]]]),
    )


_REGISTRY = {
    "fig2_map": _build_fig2_map,
    "scalar_demo": _build_scalar_demo,
    "tracking3d": _build_tracking3d,
    "terrain_nav": _build_terrain_nav,
    "generator4": _build_generator4,
}

SYSTEM_MODELS = ("scalar_demo", "tracking3d", "terrain_nav", "generator4")
APPLICATION_MODELS = ("tracking3d", "terrain_nav", "generator4")


@lru_cache(maxsize=None)
def registry_get(name: str):
    """Fetch a built-in map or system model by name."""
    try:
        builder = _REGISTRY[name]
    except KeyError:
        raise UnknownModel(
            f"unknown model {name!r}; available: {sorted(_REGISTRY)}"
        ) from None
    return builder()
