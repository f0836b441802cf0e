"""Convergence diagnostics on split chains.

Degenerate inputs (no within-chain variance) give ``nan`` rather than an
error, so a constant quantity never masquerades as converged or as
infinitely precise.
"""

from __future__ import annotations

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft

MIN_ITERATIONS = 4


def _as_chains(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must be a (chains, iterations) matrix")
    if x.shape[1] < MIN_ITERATIONS:
        raise ValueError(f"need at least {MIN_ITERATIONS} iterations per chain")
    return x


def split_chains(draws) -> np.ndarray:
    """Halve every chain; an odd middle draw is discarded."""
    x = _as_chains(draws)
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _degenerate(x: np.ndarray) -> bool:
    if not np.all(np.isfinite(x)):
        return True
    return bool(np.all(np.ptp(x, axis=1) <= 1e-12 * max(1.0, float(np.abs(x).max()))))


def split_rhat(draws) -> float:
    """Split-chain potential scale reduction factor.

    Returns ``nan`` when the within-chain variance is zero.
    """
    x = split_chains(draws)
    if _degenerate(x):
        return float("nan")
    n = x.shape[1]
    W = float(np.mean(np.var(x, axis=1, ddof=1)))
    B = n * float(np.var(np.mean(x, axis=1), ddof=1))
    if not W > 0.0:
        return float("nan")
    return float(np.sqrt(((n - 1) / n * W + B / n) / W))


def autocovariance(x) -> np.ndarray:
    """Biased autocovariance of a 1-d series at every lag, via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    m = next_fast_len(2 * n)
    f = rfft(x - x.mean(axis=-1, keepdims=True), n=m, axis=-1)
    return irfft(f * np.conj(f), n=m, axis=-1)[..., :n] / n


def ess(draws) -> float:
    """Multi-chain effective sample size on split chains.

    Autocorrelations combine within- and between-chain variance and are
    truncated by Geyer's initial positive sequence, then made monotone.
    """
    x = split_chains(draws)
    if _degenerate(x):
        return float("nan")
    m, n = x.shape
    acov = autocovariance(x)
    chain_mean = x.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = float(chain_var.mean())
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += float(np.var(chain_mean, ddof=1))
    if not var_plus > 0.0:
        return float("nan")
    mean_acov = acov.mean(axis=0)

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - mean_acov[1]) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 5 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - mean_acov[t + 1]) / var_plus
        rho_odd = 1.0 - (mean_var - mean_acov[t + 2]) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t
    if rho_even > 0.0:
        rho[max_t + 1] = rho_even
    # initial monotone sequence
    t = 1
    while t <= max_t - 3:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t])
            rho[t + 2] = rho[t + 1]
        t += 2
    total = float(m * n)
    tau = -1.0 + 2.0 * float(rho[:max_t].sum()) + float(rho[max_t + 1]) if max_t + 1 < n else \
        -1.0 + 2.0 * float(rho[:max_t].sum())
    tau = max(tau, 1.0 / np.log10(total))
    return total / tau


def ess_and_mcse(draws) -> tuple[float, float]:
    """Effective sample size and Monte Carlo standard error of the mean."""
    value = ess(draws)
    if np.isnan(value):
        return float("nan"), float("nan")
    sd = float(np.std(np.asarray(draws, dtype=float), ddof=1))
    return value, sd / np.sqrt(value)
