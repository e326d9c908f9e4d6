"""Feature statistics and whitening.

A feature map is treated as a matrix with one row per channel and one column
per pixel; callers can pass (C, N) matrices or (C, H, W) stacks and get the
same layout back.  Covariances use the population divisor N, matching the
definition the losses are built on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError, NumericalError
from .tensor import Tensor

_EIG_SWEEPS = 64
_EIG_OFFDIAG_REL = 1e-12
_SYMMETRY_TOL = 1e-9
_PSD_SLACK_REL = 1e-8
_DEGENERATE_VAR = 1e-12


def _as_matrix(features) -> tuple[np.ndarray, tuple[int, ...]]:
    """View features as (C, N) float64, returning the original shape too."""
    if hasattr(features, "values"):  # geometry.FeatureMap
        features = features.values
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 2:
        return arr, arr.shape
    if arr.ndim == 3:
        return arr.reshape(arr.shape[0], -1), arr.shape
    raise DimensionError(f"expected (C, N) or (C, H, W) features, got shape {arr.shape}")


@dataclass(frozen=True)
class Covariance:
    """A symmetric channel-by-channel covariance matrix."""

    dim: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (self.dim, self.dim):
            raise DimensionError(f"covariance matrix shape {m.shape} != ({self.dim}, {self.dim})")
        scale = max(1.0, float(np.abs(m).max()))
        if float(np.abs(m - m.T).max()) > _SYMMETRY_TOL * scale:
            raise ContractError("covariance matrix is not symmetric")
        object.__setattr__(self, "matrix", m)


def feature_mean(features) -> np.ndarray:
    """Per-channel mean over all pixels."""
    mat, _ = _as_matrix(features)
    return mat.mean(axis=1)


def covariance(features) -> Covariance:
    """Population covariance of the channels: centered gram divided by N."""
    mat, _ = _as_matrix(features)
    n = mat.shape[1]
    if n < 2:
        raise ContractError(f"covariance needs at least 2 samples, got {n}")
    centered = mat - mat.mean(axis=1, keepdims=True)
    sigma = centered @ centered.T / n
    sigma = (sigma + sigma.T) / 2.0  # exact symmetry despite BLAS rounding
    return Covariance(dim=mat.shape[0], matrix=sigma)


def _coerce_square(s) -> np.ndarray:
    if isinstance(s, Covariance):
        return s.matrix
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {arr.shape}")
    return arr


def symmetric_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (Q, lam) with eigenvalues sorted descending and matching
    eigenvector columns.  Sweeps stop when the largest off-diagonal entry
    falls below 1e-12 times the Frobenius norm of the input, or after 64
    full sweeps.
    """
    s = _coerce_square(s)
    scale = max(1.0, float(np.abs(s).max()))
    if float(np.abs(s - s.T).max()) > _SYMMETRY_TOL * scale:
        raise ContractError("symmetric_eig requires a symmetric matrix")

    n = s.shape[0]
    a = (s + s.T) / 2.0
    q = np.eye(n)
    norm = float(np.linalg.norm(s))
    if norm == 0.0 or n == 1:
        lam = np.diag(a).copy()
        order = np.argsort(-lam, kind="stable")
        return q[:, order], lam[order]

    threshold = _EIG_OFFDIAG_REL * norm
    for _ in range(_EIG_SWEEPS):
        upper = np.triu(np.abs(a), k=1)
        if float(upper.max()) < threshold:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if apr == 0.0:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = 1.0 / (theta - np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                col_p, col_r = a[:, p].copy(), a[:, r].copy()
                a[:, p] = c * col_p - sn * col_r
                a[:, r] = sn * col_p + c * col_r
                row_p, row_r = a[p, :].copy(), a[r, :].copy()
                a[p, :] = c * row_p - sn * row_r
                a[r, :] = sn * row_p + c * row_r
                a[p, r] = 0.0
                a[r, p] = 0.0
                qp, qr = q[:, p].copy(), q[:, r].copy()
                q[:, p] = c * qp - sn * qr
                q[:, r] = sn * qp + c * qr

    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    return np.ascontiguousarray(q[:, order]), lam[order]


def zca_whiten(features, eps_eig: float = 1e-5) -> np.ndarray:
    """Decorrelate channels: Q (Lam + eps)^(-1/2) Qt applied to the centered map.

    With eps_eig = 0 the input covariance must be full rank; the small
    default keeps rank-deficient maps (e.g. masked regions) finite.
    """
    if eps_eig < 0:
        raise ContractError(f"eps_eig must be non-negative, got {eps_eig}")
    mat, shape = _as_matrix(features)
    sigma = covariance(mat).matrix
    q, lam = symmetric_eig(sigma)
    slack = _PSD_SLACK_REL * float(np.linalg.norm(sigma))
    if lam.min() < -slack:
        raise NumericalError(
            f"covariance has eigenvalue {lam.min():.3e} below the PSD slack {-slack:.3e}")
    lam = np.maximum(lam, 0.0)
    damped = lam + eps_eig
    if damped.min() <= 0.0:
        raise NumericalError(
            "covariance is rank-deficient; pass eps_eig > 0 to whiten it")
    transform = (q * (1.0 / np.sqrt(damped))) @ q.T
    centered = mat - mat.mean(axis=1, keepdims=True)
    return (transform @ centered).reshape(shape)


def instance_standardize(features) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean unit-variance per channel (population divisor).

    Channels whose variance is below 1e-12 are zeroed and flagged in the
    returned boolean vector rather than divided by ~0.
    """
    mat, shape = _as_matrix(features)
    centered = mat - mat.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1)
    degenerate = var < _DEGENERATE_VAR
    inv_std = np.zeros_like(var)
    inv_std[~degenerate] = 1.0 / np.sqrt(var[~degenerate])
    out = centered * inv_std[:, None]
    return out.reshape(shape), degenerate


def whitening_loss(features) -> Tensor:
    """Mean absolute deviation of the feature covariance from identity.

    Averages |Sigma - I| over all C*C entries, so the magnitude does not
    grow with channel count.  Differentiable when given a tracked Tensor of
    shape (C, N); numpy inputs give a constant scalar tensor.
    """
    if isinstance(features, Tensor):
        f = features
        if f.data.ndim != 2:
            raise DimensionError(f"whitening_loss needs (C, N) features, got {f.shape}")
    else:
        mat, _ = _as_matrix(features)
        f = Tensor(mat)
    c, n = f.shape
    if n < 2:
        raise ContractError(f"whitening_loss needs at least 2 samples, got {n}")
    mu = f.mean(axis=1).reshape((c, 1))
    centered = f - tt.matmul(mu, Tensor(np.ones((1, n))))
    sigma = tt.scale(tt.matmul(centered, centered.T), 1.0 / n)
    return (sigma - Tensor(np.eye(c))).abs().mean()
