"""Weighted vector/matrix norms, matrix measures and weak pairings.

Three norm families are supported through :class:`NormSpec`:

* ``L1``   -- ``||x|| = sum_i eta_i |x_i|``
* ``LINF`` -- ``||x|| = max_i |x_i| / eta_i``
* ``L2``   -- ``||x|| = sqrt(x^T P x)`` with ``P`` symmetric positive definite

The matrix measure (logarithmic norm) of ``A`` is the one-sided derivative
``lim_{h->0+} (||I + hA|| - 1) / h``; closed forms are used for every family
and :func:`measure_limit_oracle` evaluates the defining limit directly.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg


class NormKind(enum.Enum):
    L1 = "l1"
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True, eq=False)
class NormSpec:
    """Selects a weighted norm on R^n.

    ``eta`` is used by the ``L1``/``LINF`` kinds, ``p_matrix`` by ``L2``.
    Use the :meth:`l1`, :meth:`linf` and :meth:`l2` constructors.
    """

    kind: NormKind
    eta: Optional[np.ndarray] = None
    p_matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind is NormKind.L2:
            if self.p_matrix is None:
                raise ValueError("L2 norm needs p_matrix")
            P = np.array(self.p_matrix, dtype=float)
            if P.ndim != 2 or P.shape[0] != P.shape[1]:
                raise ValueError(f"p_matrix must be square, got shape {P.shape}")
            if not np.all(np.isfinite(P)):
                raise ValueError("p_matrix has non-finite entries")
            if np.max(np.abs(P - P.T), initial=0.0) > 1e-12:
                raise ValueError("p_matrix is not symmetric")
            if np.linalg.eigvalsh(P)[0] <= 0:
                raise ValueError("p_matrix is not positive definite")
            object.__setattr__(self, "p_matrix", P)
        else:
            if self.eta is None:
                raise ValueError(f"{self.kind.name} norm needs eta")
            eta = np.array(self.eta, dtype=float).ravel()
            if not np.all(np.isfinite(eta)) or np.any(eta <= 0):
                raise ValueError("eta must be finite and strictly positive")
            object.__setattr__(self, "eta", eta)

    @classmethod
    def l1(cls, eta) -> "NormSpec":
        return cls(NormKind.L1, eta=eta)

    @classmethod
    def linf(cls, eta) -> "NormSpec":
        return cls(NormKind.LINF, eta=eta)

    @classmethod
    def l2(cls, p_matrix) -> "NormSpec":
        return cls(NormKind.L2, p_matrix=p_matrix)

    @property
    def dim(self) -> int:
        if self.kind is NormKind.L2:
            return self.p_matrix.shape[0]
        return self.eta.shape[0]

    def __repr__(self):
        return f"NormSpec({self.kind.name}, n={self.dim})"


def _as_vector(x, ns: NormSpec) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != ns.dim:
        raise ValueError(f"vector of shape {x.shape} does not match norm dimension {ns.dim}")
    return x


def _as_square(A, ns: NormSpec) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if A.shape[0] != ns.dim:
        raise ValueError(f"matrix of shape {A.shape} does not match norm dimension {ns.dim}")
    return A


def _p_sqrt(P: np.ndarray):
    w, V = np.linalg.eigh(P)
    s = np.sqrt(w)
    return (V * s) @ V.T, (V / s) @ V.T


def vector_norm(x, ns: NormSpec) -> float:
    x = _as_vector(x, ns)
    if ns.kind is NormKind.LINF:
        return float(np.max(np.abs(x) / ns.eta))
    if ns.kind is NormKind.L1:
        return float(np.sum(ns.eta * np.abs(x)))
    return float(np.sqrt(x @ ns.p_matrix @ x))


def _offdiag_weighted(A: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Return ``|a_ij| * eta_j / eta_i`` with the diagonal zeroed."""
    W = np.abs(A) * (eta[None, :] / eta[:, None])
    np.fill_diagonal(W, 0.0)
    return W


def matrix_norm(A, ns: NormSpec) -> float:
    """Induced matrix norm of ``A``."""
    A = _as_square(A, ns)
    if ns.kind is NormKind.LINF:
        return float(np.max(np.sum(np.abs(A) * (ns.eta[None, :] / ns.eta[:, None]), axis=1)))
    if ns.kind is NormKind.L1:
        return float(np.max(np.sum(np.abs(A) * (ns.eta[:, None] / ns.eta[None, :]), axis=0)))
    S, S_inv = _p_sqrt(ns.p_matrix)
    return float(np.linalg.norm(S @ A @ S_inv, 2))


def matrix_measure(A, ns: NormSpec) -> float:
    """Matrix measure (logarithmic norm) of ``A`` in closed form."""
    A = _as_square(A, ns)
    if ns.kind is NormKind.LINF:
        return float(np.max(np.diag(A) + _offdiag_weighted(A, ns.eta).sum(axis=1)))
    if ns.kind is NormKind.L1:
        # mu_{1,[eta]}(A) = mu_{inf,[eta]^-1}(A^T)
        return float(np.max(np.diag(A) + _offdiag_weighted(A.T, ns.eta).sum(axis=1)))
    P = ns.p_matrix
    # smallest b with A^T P + P A <= 2 b P
    return float(scipy.linalg.eigh(A.T @ P + P @ A, 2.0 * P, eigvals_only=True)[-1])


def measure_limit_oracle(A, ns: NormSpec, h: float = 1e-8) -> float:
    """Evaluate ``(||I + hA|| - 1) / h`` directly. Test oracle only."""
    if h <= 0:
        raise ValueError("h must be positive")
    A = _as_square(A, ns)
    return (matrix_norm(np.eye(A.shape[0]) + h * A, ns) - 1.0) / h


def _max_abs_index_set(z: np.ndarray) -> np.ndarray:
    m = np.max(np.abs(z))
    return np.flatnonzero(np.abs(z) == m)


def weak_pairing_inf(x, y, eta) -> float:
    """Weak pairing compatible with the weighted infinity norm.

    ``max_{i in I(y/eta)} y_i x_i / eta_i^2`` where ``I(z)`` collects every
    index attaining ``max |z_i|`` (ties are all kept). Returns 0 for ``y = 0``.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    if not (x.shape == y.shape == eta.shape):
        raise ValueError(f"dimension mismatch: {x.shape}, {y.shape}, {eta.shape}")
    if not np.any(y):
        return 0.0
    idx = _max_abs_index_set(y / eta)
    return float(np.max(y[idx] * x[idx] / eta[idx] ** 2))


def lumer_bruteforce_inf(A, eta) -> float:
    """Maximise the Lumer objective over the vertices ``x_j = +-eta_j``.

    Exponential in ``n``; intended as an independent check of the row formula.
    """
    A = np.asarray(A, dtype=float)
    eta = np.asarray(eta, dtype=float).ravel()
    n = A.shape[0]
    if n > 10:
        raise ValueError("brute force Lumer oracle limited to n <= 10")
    best = -np.inf
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        x = np.asarray(signs) * eta
        z = x / eta
        Az = (A @ x) / eta
        for i in _max_abs_index_set(z):
            best = max(best, z[i] * Az[i])
    return float(best)


def norm_of_average_identity(A, eta, alpha: float) -> float:
    """Return ``||I + alpha A||`` in the weighted infinity norm.

    Valid for ``|alpha| <= 1 / max_i |a_ii|`` (any ``alpha >= 0`` when the
    diagonal is zero), where it equals ``1 + alpha * mu(A)``; the identity is
    checked before returning.
    """
    A = np.asarray(A, dtype=float)
    ns = NormSpec.linf(eta)
    dmax = np.max(np.abs(np.diag(A)))
    if dmax == 0.0:
        if alpha < 0:
            raise ValueError("alpha must be >= 0 when the diagonal of A is zero")
    elif abs(alpha) > 1.0 / dmax:
        raise ValueError(f"|alpha| = {abs(alpha)} exceeds 1/max|a_ii| = {1.0 / dmax}")
    value = matrix_norm(np.eye(A.shape[0]) + alpha * A, ns)
    expected = 1.0 + alpha * matrix_measure(A, ns)
    if abs(value - expected) > 1e-12 * max(1.0, abs(value)):
        raise ArithmeticError(f"||I + aA|| = {value!r} differs from 1 + a*mu(A) = {expected!r}")
    return value


def _average_identity_lines(A, eta):
    A = np.asarray(A, dtype=float)
    eta = np.asarray(eta, dtype=float).ravel()
    d = np.diag(A)
    r = _offdiag_weighted(A, eta).sum(axis=1)
    # ||I + aA|| = max_i max(1 + a(d_i + r_i), -1 + a(r_i - d_i)) for a >= 0
    intercepts = np.concatenate([np.ones_like(d), -np.ones_like(d)])
    slopes = np.concatenate([d + r, r - d])
    return intercepts, slopes


def optimal_alpha_norm_min(A, eta) -> tuple[float, float]:
    """Minimise ``alpha -> ||I + alpha A||_{inf,[eta]^-1}`` over ``alpha >= 0``.

    The objective is the upper envelope of ``2n`` lines, so the minimiser is
    either ``alpha = 0`` or a crossing of two lines; all candidates are
    evaluated exactly. Returns ``(alpha_star, t_star)``, preferring the
    smallest minimiser.
    """
    c, s = _average_identity_lines(A, eta)
    cand = [0.0]
    dc = c[:, None] - c[None, :]
    ds = s[None, :] - s[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = dc / ds
    cross = cross[np.isfinite(cross) & (cross > 0)]
    cand = np.unique(np.concatenate([cand, cross]))
    values = np.max(c[None, :] + cand[:, None] * s[None, :], axis=1)
    k = int(np.argmin(values))
    return float(cand[k]), float(values[k])


def parametrize_bounded_measure(T, gamma: float) -> np.ndarray:
    """Map a free matrix ``T`` to ``A = T - diag(|T| 1) + gamma I``.

    Every output satisfies ``mu_inf(A) <= gamma``.
    """
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"T must be square, got shape {T.shape}")
    A = T.copy()
    A[np.diag_indices_from(A)] += gamma - np.abs(T).sum(axis=1)
    return A


def recover_parametrization(A, gamma: float) -> np.ndarray:
    """Inverse of :func:`parametrize_bounded_measure` on ``{mu_inf(A) <= gamma}``."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    ns = NormSpec.linf(np.ones(n))
    mu = matrix_measure(A, ns)
    if mu > gamma:
        raise ValueError(f"mu_inf(A) = {mu} exceeds gamma = {gamma}")
    off = np.abs(A).sum(axis=1) - np.abs(np.diag(A))
    T = A.copy()
    T[np.diag_indices(n)] = 0.5 * (np.diag(A) + off - gamma)
    return T


def perron_frobenius_eig(M, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Perron-Frobenius eigenvalue of a nonnegative matrix by power iteration.

    Iterates on ``M + I`` (primitive whenever ``M`` is irreducible) from the
    all-ones vector and stops when the Collatz-Wielandt bounds
    ``min_i (Mx)_i/x_i <= lambda <= max_i (Mx)_i/x_i`` are within ``tol``.
    """
    M = np.asarray(M, dtype=float)
    if np.any(M < 0):
        raise ValueError("perron_frobenius_eig needs a nonnegative matrix")
    n = M.shape[0]
    if not np.any(M):
        return 0.0
    x = np.ones(n)
    hi_prev = np.inf
    for _ in range(max_iter):
        y = M @ x
        ratio = y / x
        lo, hi = float(np.min(ratio)), float(np.max(ratio))
        if hi - lo <= tol * max(1.0, hi):
            return 0.5 * (lo + hi)
        # reducible M: the lower bound can stall below lambda, the upper one still converges
        if abs(hi - hi_prev) <= 1e-3 * tol * max(1.0, hi):
            return hi
        hi_prev = hi
        x = y + x
        x /= np.max(x)
        # keep strictly positive so the bounds stay defined
        x = np.maximum(x, np.finfo(float).tiny)
    return hi
