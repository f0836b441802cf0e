"""Log-density primitives with analytic gradients.

Scalar densities are compiled with numba so the model kernels can call them
from nopython code; they are equally usable from plain Python.  Constants
are kept (all densities are normalized) except for the LKJ density, whose
normalizing constant depends only on ``eta`` and the dimension and is
dropped.

Out-of-support points return ``-inf`` with a zero gradient; invalid scale
arguments raise ``ValueError``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
NEG_INF = -math.inf


@njit(cache=True, error_model="numpy")
def normal_lpdf_grad(x, mean, sd):
    """Normal log density and its partials wrt ``x``, ``mean`` and ``sd``."""
    if not sd > 0.0:
        raise ValueError("normal_lpdf_grad: sd must be positive")
    r = (x - mean) / sd
    lp = -0.5 * r * r - math.log(sd) - 0.5 * LOG_2PI
    d_x = -r / sd
    return lp, d_x, -d_x, (r * r - 1.0) / sd


@njit(cache=True, error_model="numpy")
def normal_suffstat_lpdf_grad(n, ybar, ss, mean, sd):
    """Summed normal log density of ``n`` iid rows given their sufficient statistics.

    ``ybar`` is the row mean and ``ss`` the centered sum of squares
    ``sum((y - ybar)**2)``.  Returns ``(lp, d_mean, d_sd)``.
    """
    if not sd > 0.0:
        raise ValueError("normal_suffstat_lpdf_grad: sd must be positive")
    if n == 0:
        return 0.0, 0.0, 0.0
    dev = ybar - mean
    quad = ss + n * dev * dev
    inv_var = 1.0 / (sd * sd)
    lp = -n * math.log(sd) - 0.5 * quad * inv_var - 0.5 * n * LOG_2PI
    return lp, n * dev * inv_var, -n / sd + quad * inv_var / sd


@njit(cache=True, error_model="numpy")
def half_cauchy_lpdf_grad(x, scale):
    """Half-Cauchy(0, scale) log density on ``x > 0`` and its derivative in ``x``."""
    if not scale > 0.0:
        raise ValueError("half_cauchy_lpdf_grad: scale must be positive")
    if not x > 0.0:
        return NEG_INF, 0.0
    u = x / scale
    lp = math.log(2.0 / (math.pi * scale)) - math.log1p(u * u)
    return lp, -2.0 * x / (scale * scale + x * x)


@njit(cache=True, error_model="numpy")
def uniform_lpdf(x, lo, hi):
    """Uniform(lo, hi) log density; constant inside the closed support."""
    if not lo < hi:
        raise ValueError("uniform_lpdf: lo must be below hi")
    if x < lo or x > hi:
        return NEG_INF
    return -math.log(hi - lo)


@njit(cache=True, error_model="numpy")
def log_cosh(y):
    a = abs(y)
    return a + math.log1p(math.exp(-2.0 * a)) - math.log(2.0)


@njit(cache=True, error_model="numpy")
def lkj2_tanh_lpdf_grad(y, eta):
    """LKJ(eta) on a 2x2 correlation with ``rho = tanh(y)``, Jacobian included.

    ``(eta - 1) * log(1 - rho**2) + log(1 - rho**2) = -2 * eta * log(cosh(y))``.
    Returns the log density and its derivative in ``y``.
    """
    return -2.0 * eta * log_cosh(y), -2.0 * eta * math.tanh(y)


# ---------------------------------------------------------------------------
# Correlation / covariance containers


@dataclass(frozen=True)
class CholeskyCorr:
    """Lower-triangular Cholesky factor of a correlation matrix."""

    factor: np.ndarray

    def __post_init__(self):
        L = np.array(self.factor, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("correlation factor must be a square matrix")
        if np.any(np.abs(np.triu(L, 1)) > 0.0):
            raise ValueError("correlation factor must be lower triangular")
        if np.any(np.diag(L) <= 0.0):
            raise ValueError("correlation factor needs a positive diagonal")
        if np.any(np.abs(np.sum(L * L, axis=1) - 1.0) > 1e-10):
            raise ValueError("correlation factor rows must have unit norm")
        L.setflags(write=False)
        object.__setattr__(self, "factor", L)

    @property
    def dim(self) -> int:
        return self.factor.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.factor @ self.factor.T

    @classmethod
    def from_matrix(cls, omega) -> "CholeskyCorr":
        omega = np.asarray(omega, dtype=float)
        if np.any(np.abs(np.diag(omega) - 1.0) > 1e-10):
            raise ValueError("correlation matrix needs a unit diagonal")
        try:
            L = np.linalg.cholesky(omega)
        except np.linalg.LinAlgError as exc:
            raise ValueError("correlation matrix is not positive definite") from exc
        # renormalize rows against round-off in the factorization
        L = L / np.linalg.norm(L, axis=1, keepdims=True)
        return cls(L)

    @classmethod
    def from_rho(cls, rho: float) -> "CholeskyCorr":
        if not -1.0 < rho < 1.0:
            raise ValueError("correlation must lie strictly inside (-1, 1)")
        return cls(np.array([[1.0, 0.0], [rho, math.sqrt(1.0 - rho * rho)]]))


@dataclass(frozen=True)
class CovarianceDecomp:
    """``V = diag(theta) Omega diag(theta)`` with Omega held as a Cholesky factor."""

    theta: np.ndarray
    corr: CholeskyCorr

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        if theta.shape[0] != self.corr.dim:
            raise ValueError("scale vector and correlation factor disagree in size")
        if np.any(~(theta > 0.0)):
            raise ValueError("scales must be positive")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def cholesky(self) -> np.ndarray:
        return self.theta[:, None] * self.corr.factor

    def to_matrix(self) -> np.ndarray:
        return self.theta[:, None] * self.corr.matrix * self.theta[None, :]

    @classmethod
    def from_matrix(cls, V) -> "CovarianceDecomp":
        V = np.asarray(V, dtype=float)
        if not np.allclose(V, V.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(V).max())):
            raise ValueError("covariance matrix must be symmetric")
        theta = np.sqrt(np.diag(V))
        if np.any(~(theta > 0.0)):
            raise ValueError("covariance matrix needs a positive diagonal")
        omega = V / np.outer(theta, theta)
        np.fill_diagonal(omega, 1.0)
        return cls(theta, CholeskyCorr.from_matrix(omega))

    # 2x2 names used throughout the models
    @property
    def sigma_mu_sq(self) -> float:
        return float(self.theta[0] ** 2)

    @property
    def sigma_tau_sq(self) -> float:
        return float(self.theta[1] ** 2)

    @property
    def sigma_tau_mu(self) -> float:
        return float(self.to_matrix()[0, 1])


def lkj_corr_lpdf_grad(corr: CholeskyCorr, eta: float):
    """LKJ(eta) log density of ``Omega = L L'`` up to its normalizing constant.

    Returns ``(lp, grad)`` where ``grad`` is the derivative with respect to the
    free strictly-lower entries of the factor (the diagonal being determined
    by the unit-row constraint); entries on and above the diagonal are zero.
    The change-of-variables term of any unconstrained parameterization is
    not included here; see :mod:`sitepool.transforms`.
    """
    if not eta > 0.0:
        raise ValueError("LKJ shape must be positive")
    L = corr.factor
    diag = np.diag(L)
    lp = 2.0 * (eta - 1.0) * float(np.sum(np.log(diag)))
    grad = -2.0 * (eta - 1.0) * L / (diag[:, None] ** 2)
    return lp, np.tril(grad, -1)


def mvn2_lpdf_grad(x, mean, decomp: CovarianceDecomp):
    """Bivariate normal log density evaluated through the Cholesky factor.

    Returns ``(lp, grads)`` with ``grads`` holding derivatives wrt ``x``,
    ``mean``, ``theta`` and the correlation ``rho``.
    """
    if decomp.corr.dim != 2:
        raise ValueError("mvn2_lpdf_grad needs a 2x2 decomposition")
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    t1, t2 = decomp.theta
    rho = decomp.corr.factor[1, 0]
    c = decomp.corr.factor[1, 1]
    d1, d2 = x - mean
    w1 = d1 / t1
    w2 = (d2 / t2 - rho * w1) / c
    lp = -LOG_2PI - math.log(t1) - math.log(t2) - math.log(c) - 0.5 * (w1 * w1 + w2 * w2)
    g_d = np.array([-w1 / t1 + w2 * rho / (c * t1), -w2 / (c * t2)])
    g_theta = np.array(
        [
            (-1.0 + w1 * w1 - rho * w1 * w2 / c) / t1,
            (-1.0 + w2 * w2 + rho * w1 * w2 / c) / t2,
        ]
    )
    g_rho = rho / (c * c) + w1 * w2 / c - w2 * w2 * rho / (c * c)
    return lp, {"x": g_d, "mean": -g_d, "theta": g_theta, "rho": g_rho}
