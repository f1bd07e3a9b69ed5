"""Hot Monte-Carlo trajectory kernels.

The per-run filter loop dominates experiment runtime, so it is compiled
with numba when available. Setting the environment variable
``KFC_NO_NUMBA=1`` (or running without numba installed) selects the pure
NumPy fallback, which routes every run through the generic
:mod:`kfcomp.filtering` implementation instead. ``benchmarks/bench_kernels.py``
times the two paths against each other.

Semantics of the two paths agree to floating-point noise for the
sigma-point estimators; the compiled path obtains Jacobians and Hessians
by central differences in standardized coordinates, so derivative-based
estimators (EKF, EKF2) may differ from an analytic-derivative model at the
finite-difference error level.

Estimator kind codes used by the kernels: 0 EKF, 1 EKF2, 2 SKF*, 3 CKF*,
4 SSKF.
"""

from __future__ import annotations

import os

import numpy as np

KIND_CODES = {"EKF": 0, "EKF2": 1, "SKF_STAR": 2, "CKF_STAR": 3, "SSKF": 4}


def _env_disabled() -> bool:
    return os.environ.get("KFC_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")


try:  # pragma: no cover - exercised implicitly by both CI paths
    if _env_disabled():
        raise ImportError("numba disabled by KFC_NO_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:  # fallback: decorators become no-ops
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


def resolve_use_numba(use_numba=None) -> bool:
    """Apply the env-flag default when the caller does not force a path."""
    if use_numba is None:
        return NUMBA_ENABLED
    return bool(use_numba) and NUMBA_ENABLED


_COMPILED = {}


def compiled_model_funcs(model):
    """(f, h) raw functions of ``model``, JIT-wrapped once per process."""
    if not NUMBA_ENABLED:
        return model.f_raw, model.h_raw
    key = model.name
    if key not in _COMPILED:
        _COMPILED[key] = (njit(cache=True)(model.f_raw), njit(cache=True)(model.h_raw))
    return _COMPILED[key]


# ---------------------------------------------------------------------------
# Small dense linear algebra (covariances are at most 6x6 here, so explicit
# loops beat LAPACK call overhead)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _chol_lower(A, L):
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not s > 0.0:  # catches non-positive and NaN
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, n):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_safe(P, L):
    """Factor P, retrying once with trace-scaled jitter. False on failure."""
    n = P.shape[0]
    tr = 0.0
    for i in range(n):
        for j in range(n):
            if not np.isfinite(P[i, j]):
                return False
        tr += P[i, i]
    if _chol_lower(P, L):
        return True
    jitter = 1e-12 * (1.0 + abs(tr) / n)
    A = P.copy()
    for i in range(n):
        A[i, i] += jitter
    return _chol_lower(A, L)


@njit(cache=True)
def _cho_solve_vec(L, b):
    """Solve (L L^T) x = b in place; returns b."""
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * b[k]
        b[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * b[k]
        b[i] = s / L[i, i]
    return b


@njit(cache=True)
def _cho_solve_mat(L, B):
    """Solve (L L^T) X = B column-wise in place; returns B."""
    n = L.shape[0]
    for c in range(B.shape[1]):
        for i in range(n):
            s = B[i, c]
            for k in range(i):
                s -= L[i, k] * B[k, c]
            B[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = B[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * B[k, c]
            B[i, c] = s / L[i, i]
    return B


# ---------------------------------------------------------------------------
# Moment estimation in standardized coordinates
# ---------------------------------------------------------------------------


@njit
def _eval_at(fn, xbar, L, u_pt, uvec, xbuf):
    n = xbar.shape[0]
    for i in range(n):
        s = xbar[i]
        for j in range(n):
            s += L[i, j] * u_pt[j]
        xbuf[i] = s
    return fn(xbuf, uvec)


@njit
def _fd_jac_u(fn, xbar, L, uvec, m, step):
    n = xbar.shape[0]
    J = np.empty((m, n))
    up = np.zeros(n)
    xb = np.empty(n)
    for a in range(n):
        up[a] = step
        fp = _eval_at(fn, xbar, L, up, uvec, xb)
        up[a] = -step
        fm = _eval_at(fn, xbar, L, up, uvec, xb)
        up[a] = 0.0
        inv = 1.0 / (2.0 * step)
        for i in range(m):
            J[i, a] = (fp[i] - fm[i]) * inv
    return J


@njit
def _fd_hess_u(fn, xbar, L, uvec, m, step, f0):
    n = xbar.shape[0]
    H = np.empty((m, n, n))
    up = np.zeros(n)
    xb = np.empty(n)
    inv2 = 1.0 / (step * step)
    for a in range(n):
        up[a] = step
        fp = _eval_at(fn, xbar, L, up, uvec, xb)
        up[a] = -step
        fm = _eval_at(fn, xbar, L, up, uvec, xb)
        up[a] = 0.0
        for i in range(m):
            H[i, a, a] = (fp[i] - 2.0 * f0[i] + fm[i]) * inv2
    inv4 = 1.0 / (4.0 * step * step)
    for a in range(n):
        for b in range(a + 1, n):
            up[a] = step
            up[b] = step
            fpp = _eval_at(fn, xbar, L, up, uvec, xb)
            up[b] = -step
            fpm = _eval_at(fn, xbar, L, up, uvec, xb)
            up[a] = -step
            up[b] = step
            fmp = _eval_at(fn, xbar, L, up, uvec, xb)
            up[b] = -step
            fmm = _eval_at(fn, xbar, L, up, uvec, xb)
            up[a] = 0.0
            up[b] = 0.0
            for i in range(m):
                v = (fpp[i] - fpm[i] - fmp[i] + fmm[i]) * inv4
                H[i, a, b] = v
                H[i, b, a] = v
    return H


@njit
def _estimate(fn, xbar, L, uvec, m, kind, beta, alpha, sphere, pts, w,
              jac_step, hess_step):
    """Moment estimate of fn(xbar + L u, uvec) for u ~ (0, I).

    Returns (z_mean (m,), P_z (m, m), P_xz (n, m)); P_xz is in standardized
    coordinates and must be mapped back through L by the caller.
    """
    n = xbar.shape[0]
    xb = np.empty(n)
    u0 = np.zeros(n)
    if kind <= 1:  # EKF / EKF2
        g0 = _eval_at(fn, xbar, L, u0, uvec, xb).copy()
        J = _fd_jac_u(fn, xbar, L, uvec, m, jac_step)
        Pz = J @ J.T
        Pxz = J.T.copy()
        z = g0
        if kind == 1:
            H = _fd_hess_u(fn, xbar, L, uvec, m, hess_step, g0)
            tr = np.empty(m)
            for i in range(m):
                t = 0.0
                for a in range(n):
                    t += H[i, a, a]
                tr[i] = t
            z = g0 + 0.5 * tr
            if sphere == 0:
                scale = beta / 4.0
                for i in range(m):
                    for j in range(m):
                        s = 0.0
                        for a in range(n):
                            for b in range(n):
                                s += H[i, a, b] * H[j, a, b]
                        Pz[i, j] += scale * s
            else:
                scale = (beta / 2.0) * n / (2.0 * (n + 2.0))
                for i in range(m):
                    for j in range(m):
                        s = 0.0
                        for a in range(n):
                            for b in range(n):
                                s += H[i, a, b] * H[j, a, b]
                        Pz[i, j] += scale * (s - tr[i] * tr[j] / n)
        return z, Pz, Pxz
    if kind == 4:  # SSKF, cancellation-free accumulation
        npts = pts.shape[0]  # simplex base, n+1 rows
        g0 = _eval_at(fn, xbar, L, u0, uvec, xb).copy()
        D = np.empty((npts, m))
        up = np.empty(n)
        for k in range(npts):
            for j in range(n):
                up[j] = alpha * pts[k, j]
            fk = _eval_at(fn, xbar, L, up, uvec, xb)
            for i in range(m):
                D[k, i] = fk[i] - g0[i]
        wj = 1.0 / (npts * alpha * alpha)
        mu = np.zeros(m)
        for k in range(npts):
            for i in range(m):
                mu[i] += D[k, i]
        for i in range(m):
            mu[i] *= wj
        z = g0 + mu
        Pz = np.zeros((m, m))
        for k in range(npts):
            for i in range(m):
                for j in range(m):
                    Pz[i, j] += D[k, i] * D[k, j]
        coef = beta - alpha * alpha
        for i in range(m):
            for j in range(m):
                Pz[i, j] = wj * Pz[i, j] + coef * mu[i] * mu[j]
        Pxz = np.zeros((n, m))
        psum = np.zeros(n)
        for k in range(npts):
            for a in range(n):
                psum[a] += pts[k, a]
                for i in range(m):
                    Pxz[a, i] += pts[k, a] * D[k, i]
        aw = alpha * wj
        for a in range(n):
            for i in range(m):
                Pxz[a, i] = aw * (Pxz[a, i] - psum[a] * mu[i])
        return z, Pz, Pxz
    # SKF* / CKF*: plain weighted sample moments plus rank-one compensation
    npts = pts.shape[0]
    g0 = _eval_at(fn, xbar, L, u0, uvec, xb).copy()
    Y = np.empty((npts, m))
    for k in range(npts):
        fk = _eval_at(fn, xbar, L, pts[k], uvec, xb)
        for i in range(m):
            Y[k, i] = fk[i]
    z = np.zeros(m)
    for k in range(npts):
        for i in range(m):
            z[i] += w[k] * Y[k, i]
    Pz = np.zeros((m, m))
    Pxz = np.zeros((n, m))
    for k in range(npts):
        for i in range(m):
            di = Y[k, i] - z[i]
            for j in range(m):
                Pz[i, j] += w[k] * di * (Y[k, j] - z[j])
            for a in range(n):
                Pxz[a, i] += w[k] * pts[k, a] * di
    for i in range(m):
        for j in range(m):
            Pz[i, j] += beta * (g0[i] - z[i]) * (g0[j] - z[j])
    return z, Pz, Pxz


# ---------------------------------------------------------------------------
# Whole-batch trajectory kernel
# ---------------------------------------------------------------------------


@njit
def _run_mc(f, h, us, Q, R, x0m, P0, x0_truth, wn, vn, kind, beta, alpha,
            sphere, recal, backout, jac_step, hess_step, pts, w,
            err_sq, est_var, nis_out, backed, diverged, viol):
    runs, T, n = wn.shape
    m = R.shape[0]
    L = np.empty((n, n))
    LS = np.empty((m, m))
    for r in range(runs):
        x_true = x0_truth[r].copy()
        x = x0m.copy()
        P = P0.copy()
        for t in range(T):
            u = us[t]
            x_true = f(x_true, u) + wn[r, t]
            zmeas = h(x_true, u) + vn[r, t]
            bad = False
            for i in range(m):
                if not np.isfinite(zmeas[i]):
                    bad = True
            if bad or not _chol_safe(P, L):
                diverged[r] = t + 1
                break
            # predict
            zf, Pzf, _ = _estimate(f, x, L, u, n, kind, beta, alpha, sphere,
                                   pts, w, jac_step, hess_step)
            x_pred = zf
            P_pred = 0.5 * (Pzf + Pzf.T) + Q
            if not _chol_safe(P_pred, L):
                diverged[r] = t + 1
                break
            # update (mean only)
            zh, Pzh, Pxzu = _estimate(h, x_pred, L, u, m, kind, beta, alpha,
                                      sphere, pts, w, jac_step, hess_step)
            Pxz = L @ Pxzu
            S = 0.5 * (Pzh + Pzh.T) + R
            if not _chol_safe(S, LS):
                diverged[r] = t + 1
                break
            Kt = _cho_solve_mat(LS, Pxz.T.copy())  # K^T = S^-1 Pxz^T
            resid = zmeas - zh
            y = _cho_solve_vec(LS, resid.copy())
            nis = 0.0
            for i in range(m):
                nis += resid[i] * y[i]
            x_upd = x_pred + Kt.T @ resid
            # recalibrate (covariance only)
            if recal:
                zh2, Pzh2, Pxzu2 = _estimate(h, x_upd, L, u, m, kind, beta,
                                             alpha, sphere, pts, w,
                                             jac_step, hess_step)
                S2 = 0.5 * (Pzh2 + Pzh2.T) + R
                Pxz2 = L @ Pxzu2
            else:
                S2 = S
                Pxz2 = Pxz
            KS2 = Kt.T @ S2 @ Kt
            XK = Pxz2 @ Kt
            P_post = P_pred + KS2 - XK - XK.T
            P_post = 0.5 * (P_post + P_post.T)
            # back out
            tr_pred = 0.0
            tr_post = 0.0
            for i in range(n):
                tr_pred += P_pred[i, i]
                tr_post += P_post[i, i]
            was_backed = False
            if backout and tr_post > tr_pred:
                P_post = P_pred
                x_upd = x_pred
                was_backed = True
                tr_post = tr_pred
            if backout and tr_post > tr_pred:
                viol[r] += 1
            if not np.isfinite(tr_post):
                diverged[r] = t + 1
                break
            x = x_upd
            P = P_post
            for i in range(n):
                err_sq[r, t, i] = (x[i] - x_true[i]) ** 2
                est_var[r, t, i] = P[i, i]
            nis_out[r, t] = nis
            backed[r, t] = was_backed
    return 0


def run_batch_numba(model, cfg, us, x0_truth, wn, vn, recalibrate, backout):
    """Compiled batch runner; arrays must be float64 and C-contiguous."""
    from .moments import sigma_points, simplex_base

    runs, T, _ = wn.shape
    n, m = model.n_x, model.n_z
    f, h = compiled_model_funcs(model)
    kind = KIND_CODES[cfg.kind]
    if cfg.kind in ("SKF_STAR", "CKF_STAR"):
        pset = sigma_points("SKF" if cfg.kind == "SKF_STAR" else "CKF", n)
        pts, w = pset.points, pset.weights
    elif cfg.kind == "SSKF":
        pts, w = simplex_base(n), np.full(n + 1, 1.0 / (n + 1))
    else:
        pts, w = np.zeros((1, n)), np.ones(1)
    err_sq = np.full((runs, T, n), np.nan)
    est_var = np.full((runs, T, n), np.nan)
    nis = np.full((runs, T), np.nan)
    backed = np.zeros((runs, T), dtype=np.bool_)
    diverged = np.zeros(runs, dtype=np.int64)
    viol = np.zeros(runs, dtype=np.int64)
    _run_mc(f, h, np.ascontiguousarray(us), model.Q, model.R,
            model.x0_mean, model.P0, x0_truth, wn, vn,
            kind, float(cfg.beta), float(cfg.alpha),
            1 if cfg.ekf2_mode == "sphere" else 0,
            bool(recalibrate), bool(backout),
            1e-5, 1e-3, np.ascontiguousarray(pts), np.ascontiguousarray(w),
            err_sq, est_var, nis, backed, diverged, viol)
    return err_sq, est_var, nis, backed, diverged, viol


def run_batch_numpy(model, cfg, us, x0_truth, wn, vn, recalibrate, backout):
    """Pure NumPy fallback: per-run loop over the generic filter step."""
    from . import filtering
    from .errors import KfcompError

    runs, T, _ = wn.shape
    n = model.n_x
    fcfg = filtering.FilterConfig(cfg, recalibrate_enabled=recalibrate,
                                  backout_enabled=backout)
    err_sq = np.full((runs, T, n), np.nan)
    est_var = np.full((runs, T, n), np.nan)
    nis = np.full((runs, T), np.nan)
    backed = np.zeros((runs, T), dtype=np.bool_)
    diverged = np.zeros(runs, dtype=np.int64)
    viol = np.zeros(runs, dtype=np.int64)
    for r in range(runs):
        x_true = x0_truth[r].copy()
        b = filtering.Belief(model.x0_mean.copy(), model.P0.copy())
        for t in range(T):
            u = us[t]
            x_true = model.f_raw(x_true, u) + wn[r, t]
            z = model.h_raw(x_true, u) + vn[r, t]
            if not np.all(np.isfinite(z)):
                diverged[r] = t + 1
                break
            try:
                b_pred = filtering.predict(b, model, u, fcfg)
                tr_pred = float(np.trace(b_pred.P))
                b_upd, trace = filtering.update(b_pred, model, z, fcfg)
                b_post, trace = filtering.recalibrate(b_pred, b_upd, model,
                                                      trace.K, fcfg, trace)
                b, trace = filtering.back_out(b_pred, b_post, trace, fcfg)
            except KfcompError:
                diverged[r] = t + 1
                break
            if not np.all(np.isfinite(b.x)) or not np.isfinite(np.trace(b.P)):
                diverged[r] = t + 1
                break
            if backout and float(np.trace(b.P)) > tr_pred * (1 + 1e-12) + 1e-300:
                viol[r] += 1
            err_sq[r, t] = (b.x - x_true) ** 2
            est_var[r, t] = np.diag(b.P)
            nis[r, t] = trace.nis
            backed[r, t] = trace.backed_out
    return err_sq, est_var, nis, backed, diverged, viol


def run_batch(model, cfg, us, x0_truth, wn, vn, recalibrate=True, backout=True,
              use_numba=None):
    """Dispatch a Monte-Carlo batch to the compiled or fallback path."""
    runner = run_batch_numba if resolve_use_numba(use_numba) else run_batch_numpy
    return runner(model, cfg, us, x0_truth, wn, vn, recalibrate, backout)
