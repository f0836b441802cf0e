"""Maps between the sampler's unconstrained space and constrained parameters.

Every transform works elementwise on the trailing axis so a whole draw
matrix can be constrained at once.  ``log_jacobian`` is the log absolute
determinant of d(constrained)/d(unconstrained), summed over the trailing axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logit


@dataclass(frozen=True)
class Identity:
    def forward(self, u):
        return np.asarray(u, dtype=float)

    def inverse(self, x):
        return np.asarray(x, dtype=float)

    def log_jacobian(self, u):
        return np.zeros(np.shape(u)[:-1])


@dataclass(frozen=True)
class Positive:
    """``x = exp(u)``."""

    def forward(self, u):
        return np.exp(u)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0.0):
            raise ValueError("Positive.inverse needs x > 0")
        return np.log(x)

    def log_jacobian(self, u):
        return np.sum(u, axis=-1)


@dataclass(frozen=True)
class Bounded:
    """``x = lo + (hi - lo) * sigmoid(u)``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError(f"invalid bounds ({self.lo}, {self.hi})")

    def forward(self, u):
        return self.lo + (self.hi - self.lo) * expit(u)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        if np.any((x <= self.lo) | (x >= self.hi)):
            raise ValueError("Bounded.inverse needs lo < x < hi")
        return logit((x - self.lo) / (self.hi - self.lo))

    def log_jacobian(self, u):
        u = np.asarray(u, dtype=float)
        return np.sum(math.log(self.hi - self.lo) + log_expit(u) + log_expit(-u), axis=-1)


def scale_transform(upper: float | None):
    """Positive scales, optionally truncated above."""
    return Positive() if upper is None else Bounded(0.0, upper)


@dataclass(frozen=True)
class TanhCorr:
    """Independent 2x2 correlations ``rho = tanh(y)``; one per element."""

    def forward(self, u):
        return np.tanh(u)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) >= 1.0):
            raise ValueError("correlations must lie strictly inside (-1, 1)")
        return np.arctanh(x)

    def log_jacobian(self, u):
        u = np.asarray(u, dtype=float)
        # log(1 - tanh(u)^2) = 2 * (log 2 - |u| - log1p(exp(-2|u|)))
        a = np.abs(u)
        return np.sum(2.0 * (math.log(2.0) - a - np.log1p(np.exp(-2.0 * a))), axis=-1)


@dataclass(frozen=True)
class CorrCholesky:
    """Stick-breaking map from ``dim*(dim-1)/2`` reals to a correlation factor.

    Canonical partial correlations ``z = tanh(y)`` fill the strictly lower
    triangle row by row; each row is completed to unit norm.  The log
    Jacobian is taken with respect to the off-diagonal entries of
    ``Omega = L L'`` so that a density on Omega (e.g. LKJ) can be used
    directly.
    """

    dim: int

    @property
    def size(self) -> int:
        return self.dim * (self.dim - 1) // 2

    def forward(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.size:
            raise ValueError(f"expected {self.size} unconstrained values")
        lead = u.shape[:-1]
        z = np.tanh(u)
        L = np.zeros(lead + (self.dim, self.dim))
        L[..., 0, 0] = 1.0
        pos = 0
        for i in range(1, self.dim):
            remaining = np.ones(lead)
            for j in range(i):
                L[..., i, j] = z[..., pos] * np.sqrt(remaining)
                remaining = remaining - L[..., i, j] ** 2
                pos += 1
            L[..., i, i] = np.sqrt(remaining)
        return L

    def inverse(self, L):
        L = np.asarray(L, dtype=float)
        lead = L.shape[:-2]
        u = np.zeros(lead + (self.size,))
        pos = 0
        for i in range(1, self.dim):
            remaining = np.ones(lead)
            for j in range(i):
                z = L[..., i, j] / np.sqrt(remaining)
                if np.any(np.abs(z) >= 1.0):
                    raise ValueError("factor is on the boundary of the correlation set")
                u[..., pos] = np.arctanh(z)
                remaining = remaining - L[..., i, j] ** 2
                pos += 1
        return u

    def log_jacobian(self, u):
        u = np.asarray(u, dtype=float)
        lead = u.shape[:-1]
        z = np.tanh(u)
        total = np.zeros(lead)
        pos = 0
        for i in range(1, self.dim):
            remaining = np.ones(lead)
            for j in range(i):
                # d tanh, then the stick-breaking scale sqrt(remaining)
                total += np.log1p(-z[..., pos] ** 2) + 0.5 * np.log(remaining)
                remaining = remaining * (1.0 - z[..., pos] ** 2)
                pos += 1
            # factor -> correlation matrix: prod_i L_ii^(dim - 1 - i)
            total += (self.dim - 1 - i) * 0.5 * np.log(remaining)
        return total
