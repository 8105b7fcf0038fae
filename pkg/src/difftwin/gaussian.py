"""Dense Gaussian primitives: estimates, whitening, KL divergence, projection.

All covariances are plain dense float64 arrays. Symmetry is enforced by
symmetrization at construction; near-singular matrices are regularized only
inside whitening and KL, never in stored state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularCovariance

# Relative eigenvalue floor below which a covariance counts as singular.
_SINGULAR_RTOL = 1e-12
# Regularization scale used transiently inside whitening and KL.
_REG_RTOL = 1e-10


def _as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    return v.reshape(-1)


def _as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def symmetrize(cov) -> np.ndarray:
    """Return (C + C^T)/2 as a fresh array."""
    c = _as_matrix(cov)
    if c.shape[0] != c.shape[1]:
        raise DimensionMismatch(f"covariance must be square, got {c.shape}")
    return 0.5 * (c + c.T)


@dataclass(frozen=True)
class GaussianEstimate:
    """Mean vector plus symmetric PSD covariance; the unit of exchanged state.

    The covariance is symmetrized on construction. Validation rejects
    covariances with eigenvalues below -1e-10 times the largest eigenvalue.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov):
        mean = _as_vector(mean)
        cov = symmetrize(cov)
        if cov.shape[0] != mean.shape[0]:
            raise DimensionMismatch(
                f"mean has dim {mean.shape[0]} but cov is {cov.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("GaussianEstimate requires finite mean and cov")
        eigs = np.linalg.eigvalsh(cov)
        top = max(eigs[-1], 0.0)
        if eigs[0] < -1e-10 * max(top, 1e-300):
            raise SingularCovariance(
                f"covariance indefinite: min eigenvalue {eigs[0]:.3e} "
                f"vs max {top:.3e}"
            )
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GaussianEstimate):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.cov, other.cov
        )


@dataclass(frozen=True)
class LinearObservation:
    """A linear view M x of the state with a Gaussian value for M x.

    M must have full row rank; rank-deficient observation matrices are
    rejected at construction.
    """

    matrix: np.ndarray
    value: GaussianEstimate

    def __init__(self, matrix, value: GaussianEstimate):
        m = _as_matrix(matrix)
        if m.shape[0] != value.dim:
            raise DimensionMismatch(
                f"observation matrix has {m.shape[0]} rows but value dim is {value.dim}"
            )
        if m.shape[0] > m.shape[1] or np.linalg.matrix_rank(m) < m.shape[0]:
            raise DimensionMismatch(
                f"observation matrix {m.shape} does not have full row rank"
            )
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "value", value)

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def state_dim(self) -> int:
        return self.matrix.shape[1]


def _regularized(cov: np.ndarray) -> np.ndarray:
    n = cov.shape[0]
    eps = _REG_RTOL * np.trace(cov) / n
    if eps > 0.0:
        return cov + eps * np.eye(n)
    return cov


def whitening_from_cov(cov) -> np.ndarray:
    """Whitening operator L with L^T L = cov^{-1}.

    Convention: L is the inverse of the lower Cholesky factor C of the
    covariance (cov = C C^T, L = C^{-1}), so L is lower triangular and
    whitened residuals L(x - mu) have identity covariance.

    Raises SingularCovariance when the smallest eigenvalue is below
    1e-12 times the largest.
    """
    c = symmetrize(cov)
    eigs = np.linalg.eigvalsh(c)
    if eigs[0] <= _SINGULAR_RTOL * max(eigs[-1], 0.0) or eigs[-1] <= 0.0:
        raise SingularCovariance(
            f"covariance not invertible: eigenvalue range [{eigs[0]:.3e}, {eigs[-1]:.3e}]"
        )
    chol = np.linalg.cholesky(_regularized(c))
    n = c.shape[0]
    # Lower-triangular inverse by forward substitution on the identity.
    return np.linalg.solve(chol, np.eye(n))


def whitening_from_cov_fast(cov) -> np.ndarray:
    """Cholesky-based whitening without the eigenvalue precondition check.

    Internal hot path for fusion assembly; falls back to the checked
    variant (and its diagnostics) when the factorization fails.
    """
    c = symmetrize(cov)
    try:
        chol = np.linalg.cholesky(_regularized(c))
    except np.linalg.LinAlgError:
        return whitening_from_cov(c)
    return np.linalg.solve(chol, np.eye(c.shape[0]))


def kl_divergence_bits(p: GaussianEstimate, q: GaussianEstimate) -> float:
    """KL(p || q) between two Gaussians, in bits.

    Standard closed form in nats divided by ln 2. Both covariances are
    transiently regularized; result is clamped at zero against round-off.
    """
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimension mismatch: {p.dim} vs {q.dim}")
    k = p.dim
    cov_p = _regularized(np.asarray(p.cov))
    cov_q = _regularized(np.asarray(q.cov))
    try:
        chol_q = np.linalg.cholesky(cov_q)
        chol_p = np.linalg.cholesky(cov_p)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"KL requires invertible covariances: {exc}") from exc
    # tr(Sigma_q^{-1} Sigma_p) via triangular solves.
    a = np.linalg.solve(chol_q, cov_p)
    tr = float(np.trace(np.linalg.solve(chol_q, a.T)))
    diff = q.mean - p.mean
    y = np.linalg.solve(chol_q, diff)
    maha = float(y @ y)
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(chol_q))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(chol_p))))
    nats = 0.5 * (tr + maha - k + logdet_q - logdet_p)
    return max(nats, 0.0) / math.log(2.0)


def project(est: GaussianEstimate, matrix) -> GaussianEstimate:
    """Project an estimate through a linear map: (M mu, M Gamma M^T)."""
    m = _as_matrix(matrix)
    if m.shape[1] != est.dim:
        raise DimensionMismatch(
            f"projection matrix has {m.shape[1]} columns but estimate dim is {est.dim}"
        )
    return GaussianEstimate(m @ est.mean, m @ est.cov @ m.T)
