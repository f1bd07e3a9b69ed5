"""Small numerical kernel: factorizations, eigen bounds, Haar-random
orthogonal matrices, finite differences, and reproducible random streams.

Covariances are plain symmetric ``numpy`` arrays throughout the package;
producers symmetrize before returning and consumers may assume
``M == M.T`` up to storage round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    NonFiniteEvaluation,
    NonFiniteInput,
    NotPositiveSemidefinite,
)

# Default finite-difference steps, balancing truncation against round-off
# at double precision.
JAC_STEP = 1e-5
HESS_STEP = 1e-3


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Symmetric part of a square matrix."""
    return 0.5 * (M + M.T)


def psd_tol(M: np.ndarray) -> float:
    """PSD slack for a matrix at its own trace scale.

    A symmetric matrix counts as PSD when its smallest eigenvalue is at
    least ``-psd_tol(M)``; the slack absorbs floating-point noise.
    """
    return 1e-8 * (1.0 + abs(float(np.trace(M))))


def cholesky(P: np.ndarray) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T == P.

    Rank-deficient PSD input is regularized with a trace-scaled jitter and
    refactorized; input that is indefinite beyond ``psd_tol`` raises
    :class:`NotPositiveSemidefinite`, which upstream code treats as filter
    divergence.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise NotPositiveSemidefinite(f"expected a square matrix, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise NonFiniteInput("matrix contains non-finite entries")
    P = symmetrize(P)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    n = P.shape[0]
    jitter = 1e-12 * (1.0 + abs(float(np.trace(P))) / n)
    try:
        return np.linalg.cholesky(P + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        pass
    lam = min_eig_sym(P)
    if lam < -psd_tol(P):
        raise NotPositiveSemidefinite(
            f"smallest eigenvalue {lam:.3e} below tolerance {-psd_tol(P):.3e}"
        )
    # PSD within tolerance but numerically singular: shift just past zero.
    return np.linalg.cholesky(P + (-lam + jitter) * np.eye(n))


def min_eig_sym(M: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NonFiniteInput("matrix contains non-finite entries")
    return float(np.linalg.eigvalsh(symmetrize(M))[0])


def haar_orthogonal(n: int, rng, size: int | None = None) -> np.ndarray:
    """Orthogonal matrix (or stack of them) drawn Haar-uniformly from O(n).

    Uses QR of an i.i.d. standard-normal matrix with the R-factor diagonal
    signs folded into Q, the canonical exact construction. ``rng`` may be a
    ``numpy.random.Generator`` or an :class:`RngStream`.

    Parameters
    ----------
    n : matrix dimension, >= 1.
    rng : random source.
    size : if given, return an array of shape ``(size, n, n)``.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    shape = (n, n) if size is None else (size, n, n)
    Z = gen.standard_normal(shape)
    Q, R = np.linalg.qr(Z)
    d = np.diagonal(R, axis1=-2, axis2=-1).copy()
    d[d == 0] = 1.0
    return Q * np.sign(d)[..., None, :]


def fd_jacobian(f, x: np.ndarray, h: float = JAC_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vector map at x, shape (m, n)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    cols = []
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        cols.append((np.asarray(f(x + e), float) - np.asarray(f(x - e), float)) / (2.0 * h))
    J = np.column_stack(cols)
    if not np.all(np.isfinite(J)):
        raise NonFiniteEvaluation("finite-difference Jacobian is not finite")
    return J


def fd_hessians(f, x: np.ndarray, h: float = HESS_STEP) -> np.ndarray:
    """Central-difference Hessians of each output of a vector map at x.

    Returns an array of shape (m, n, n); each slice is symmetrized.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    f0 = np.asarray(f(x), dtype=float)
    m = f0.shape[0]
    H = np.empty((m, n, n))
    plus = np.empty((n, m))
    minus = np.empty((n, m))
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        plus[a] = np.asarray(f(x + e), float)
        minus[a] = np.asarray(f(x - e), float)
        H[:, a, a] = (plus[a] - 2.0 * f0 + minus[a]) / h**2
    for a in range(n):
        ea = np.zeros(n)
        ea[a] = h
        for b in range(a + 1, n):
            eb = np.zeros(n)
            eb[b] = h
            pp = np.asarray(f(x + ea + eb), float)
            pm = np.asarray(f(x + ea - eb), float)
            mp = np.asarray(f(x - ea + eb), float)
            mm = np.asarray(f(x - ea - eb), float)
            val = (pp - pm - mp + mm) / (4.0 * h**2)
            H[:, a, b] = val
            H[:, b, a] = val
    if not np.all(np.isfinite(H)):
        raise NonFiniteEvaluation("finite-difference Hessian is not finite")
    return H


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: (seed, stream_id) -> independent draws.

    Identical pairs reproduce draws bit-for-bit; distinct stream ids give
    statistically independent streams (Philox keyed on both words). No
    global RNG state is used anywhere in the package.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, offset: int) -> "RngStream":
        """Stream with the same seed and a shifted stream id."""
        return RngStream(self.seed, (self.stream_id + offset) & 0xFFFFFFFFFFFFFFFF)


def derive_stream(seed: int, *key_parts) -> RngStream:
    """Stream whose id is a stable hash of the given key parts.

    Hashing goes through blake2 so ids do not depend on the process hash
    seed; any mix of strings, ints, and floats is accepted.
    """
    import hashlib

    hsh = hashlib.blake2b(digest_size=8)
    for part in key_parts:
        hsh.update(repr(part).encode())
        hsh.update(b"\x1f")
    return RngStream(seed, int.from_bytes(hsh.digest(), "little"))
