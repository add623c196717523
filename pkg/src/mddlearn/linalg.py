"""SPD factor/solve, Gram and Gaussian kernel blocks, and the rank-one fast apply."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

# |b_k| at or below this fraction of max|b| disables the fast apply
FAST_APPLY_GUARD = 1e-12


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (non-positive pivot at index {pivot})")


class FastApplyUnavailable(ArithmeticError):
    """Raised when the divisor vector has entries too close to zero; solve exactly instead."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"fast apply unavailable: divisor entry {index} is below the zero guard")


@dataclass(frozen=True)
class SpdFactor:
    lower: np.ndarray

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


@dataclass(frozen=True)
class KernelConfig:
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"kernel bandwidth sigma must be positive, got {self.sigma}")


def spd_factorize(A) -> SpdFactor:
    """Cholesky factor ``L`` with ``L @ L.T == A``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if A.shape[0] == 0:
        return SpdFactor(np.zeros((0, 0)))
    L, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        # LAPACK reports the 1-based order of the failing leading minor
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf rejected argument {-info}")
    return SpdFactor(L)


def solve(f: SpdFactor, rhs) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != f.dimension:
        raise ValueError(f"rhs has leading dimension {rhs.shape[0]}, factor has {f.dimension}")
    z = solve_triangular(f.lower, rhs, lower=True, check_finite=False)
    return solve_triangular(f.lower, z, lower=True, trans="T", check_finite=False)


def linear_gram(X, y, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Local normal-equation system for one shard.

    ``X`` is d x n with samples as columns. Returns ``A = X X^T / n + lam I``
    and ``b = X y / n``.
    """
    if not lam > 0:
        raise ValueError(f"ridge parameter must be positive, got {lam}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    d, n = X.shape
    if n < 1:
        raise ValueError("shard has no samples")
    if y.shape[0] != n:
        raise ValueError(f"{n} samples but {y.shape[0]} targets")
    A = (X @ X.T) / n
    A[np.diag_indices(d)] += lam
    return A, (X @ y) / n


def sq_distances(Xa, Xb) -> np.ndarray:
    Xa = np.asarray(Xa, dtype=np.float64)
    Xb = np.asarray(Xb, dtype=np.float64)
    if Xa.shape[1] != Xb.shape[1]:
        raise ValueError(f"feature dimensions differ: {Xa.shape[1]} vs {Xb.shape[1]}")
    na = np.einsum("ij,ij->i", Xa, Xa)
    nb = np.einsum("ij,ij->i", Xb, Xb)
    D = na[:, None] + nb[None, :] - 2.0 * (Xa @ Xb.T)
    np.maximum(D, 0.0, out=D)
    return D


def kernel_matrix(Xa, Xb, cfg: KernelConfig) -> np.ndarray:
    """Gaussian kernel block ``exp(-||x_p - x_q||^2 / (2 sigma^2))``, rows of Xa by rows of Xb."""
    if not cfg.sigma > 0:
        raise ValueError(f"kernel bandwidth sigma must be positive, got {cfg.sigma}")
    same = Xa is Xb
    D = sq_distances(Xa, Xb)
    if same:
        np.fill_diagonal(D, 0.0)
        D = 0.5 * (D + D.T)
    K = np.exp(D * (-0.5 / cfg.sigma**2))
    return K


def linear_kernel(Xa, Xb) -> np.ndarray:
    return np.asarray(Xa, dtype=np.float64) @ np.asarray(Xb, dtype=np.float64).T


def fast_inverse_apply(c, b, d) -> np.ndarray:
    """Elementwise ``(d . c) / b``.

    Given ``c = A^{-1} b`` this is offered as a cheap substitute for
    ``A^{-1} d``. Only the projection ``r . b == len(b) * (d . c)`` is
    guaranteed; for general SPD ``A`` the result is not ``A^{-1} d``.
    """
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if not (c.shape == b.shape == d.shape):
        raise ValueError(f"length mismatch: c{c.shape}, b{b.shape}, d{d.shape}")
    if b.size == 0:
        return np.zeros(0)
    absb = np.abs(b)
    small = np.flatnonzero(absb <= FAST_APPLY_GUARD * absb.max())
    if small.size:
        raise FastApplyUnavailable(int(small[0]))
    return float(d @ c) / b
