"""Compiled log-posterior kernels, ``kernel(q, data) -> (lp, grad)``.

All site effects are non-centered: a site's (control mean, effect) pair is
the parent mean plus ``diag(theta) @ L_Omega @ z_k`` with ``z_k`` standard
normal.  ``q`` is the unconstrained parameter vector and ``lp`` includes the
log-Jacobian of every constraining transform.

Prior settings travel in a float vector so one compiled kernel serves any
configuration; the index constants below name its slots.
"""

import math

import numpy as np
from numba import njit

from ..distributions import (
    LOG_2PI,
    half_cauchy_lpdf_grad,
    lkj2_tanh_lpdf_grad,
    normal_lpdf_grad,
    normal_suffstat_lpdf_grad,
)

P_HYPER_SD = 0
P_SCALE = 1
P_SCALE_UPPER = 2  # +inf when the scale prior is untruncated
P_ETA = 3
P_SY_LO = 4
P_SY_HI = 5
P_RIDGE_SD = 6
P_SCALE_JACOBIAN = 7  # 1.0 normally; 0.0 drops the scale log-Jacobian (negative control)
N_PRIOR = 8


@njit(cache=True, error_model="numpy")
def _log_sigmoid(u):
    if u >= 0.0:
        return -math.log1p(math.exp(-u))
    return u - math.log1p(math.exp(u))


@njit(cache=True, error_model="numpy")
def constrain_scale(u, upper):
    """Positive scale from ``u``: ``exp(u)`` or ``upper * sigmoid(u)``.

    Returns ``(x, log_jac, dx_du, dlogjac_du)``.
    """
    if math.isinf(upper):
        x = math.exp(u)
        return x, u, x, 1.0
    s = 1.0 / (1.0 + math.exp(-u))
    lj = math.log(upper) + _log_sigmoid(u) + _log_sigmoid(-u)
    return upper * s, lj, upper * s * (1.0 - s), 1.0 - 2.0 * s


@njit(cache=True, error_model="numpy")
def constrain_interval(u, lo, hi):
    s = 1.0 / (1.0 + math.exp(-u))
    lj = math.log(hi - lo) + _log_sigmoid(u) + _log_sigmoid(-u)
    return lo + (hi - lo) * s, lj, (hi - lo) * s * (1.0 - s), 1.0 - 2.0 * s


@njit(cache=True, error_model="numpy")
def _scale_prior(u, prior):
    """Half-Cauchy scale plus Jacobian; returns (x, lp, dlp_du)."""
    x, lj, dx, dlj = constrain_scale(u, prior[P_SCALE_UPPER])
    lp, dx_lp = half_cauchy_lpdf_grad(x, prior[P_SCALE])
    w = prior[P_SCALE_JACOBIAN]
    return x, lp + w * lj, dx_lp * dx + w * dlj


@njit(cache=True, error_model="numpy")
def rubin_kernel(q, data):
    """Normal-normal model on summary estimates.

    ``q = [tau, u_sigma_tau, z_1..z_K]``; ``data = (tau_hat, se, prior)``.
    """
    tau_hat, se, prior = data
    K = tau_hat.shape[0]
    g = np.zeros(q.shape[0])
    tau = q[0]
    lp, g_tau, _, _ = normal_lpdf_grad(tau, 0.0, prior[P_HYPER_SD])
    sig, lp_s, g_u = _scale_prior(q[1], prior)
    lp += lp_s
    g_sig = 0.0
    for k in range(K):
        z = q[2 + k]
        tk = tau + sig * z
        l, _, d_tk, _ = normal_lpdf_grad(tau_hat[k], tk, se[k])
        lp += l - 0.5 * z * z - 0.5 * LOG_2PI
        g_tau += d_tk
        g_sig += d_tk * z
        g[2 + k] = d_tk * sig - z
    g[0] = g_tau
    _, _, dx, _ = constrain_scale(q[1], prior[P_SCALE_UPPER])
    g[1] = g_u + g_sig * dx
    return lp, g


@njit(cache=True, error_model="numpy")
def summary_joint_kernel(q, data):
    """Bivariate parent on (control mean, effect) estimates.

    ``q = [mu, tau, u_theta_1, u_theta_2, y_rho, z_11, z_12, ..., z_K2]``;
    ``data = (mu_hat, se_mu, tau_hat, se_tau, prior)``.
    """
    mu_hat, se_mu, tau_hat, se_tau, prior = data
    K = tau_hat.shape[0]
    g = np.zeros(q.shape[0])
    mu = q[0]
    tau = q[1]
    lp_m, g_mu, _, _ = normal_lpdf_grad(mu, 0.0, prior[P_HYPER_SD])
    lp_t, g_tau, _, _ = normal_lpdf_grad(tau, 0.0, prior[P_HYPER_SD])
    th1, lp1, g_u1 = _scale_prior(q[2], prior)
    th2, lp2, g_u2 = _scale_prior(q[3], prior)
    lp_r, g_y = lkj2_tanh_lpdf_grad(q[4], prior[P_ETA])
    lp = lp_m + lp_t + lp1 + lp2 + lp_r
    rho = math.tanh(q[4])
    cc = 1.0 / math.cosh(q[4])
    g_th1 = 0.0
    g_th2 = 0.0
    for k in range(K):
        o = 5 + 2 * k
        z1 = q[o]
        z2 = q[o + 1]
        lp -= 0.5 * (z1 * z1 + z2 * z2) + LOG_2PI
        mk = mu + th1 * z1
        tk = tau + th2 * (rho * z1 + cc * z2)
        l1, _, gm, _ = normal_lpdf_grad(mu_hat[k], mk, se_mu[k])
        l2, _, gt, _ = normal_lpdf_grad(tau_hat[k], tk, se_tau[k])
        lp += l1 + l2
        g_mu += gm
        g_tau += gt
        g_th1 += gm * z1
        g_th2 += gt * (rho * z1 + cc * z2)
        g_y += gt * th2 * (cc * cc * z1 - rho * cc * z2)
        g[o] = gm * th1 + gt * th2 * rho - z1
        g[o + 1] = gt * th2 * cc - z2
    upper = prior[P_SCALE_UPPER]
    g[0] = g_mu
    g[1] = g_tau
    g[2] = g_u1 + g_th1 * constrain_scale(q[2], upper)[2]
    g[3] = g_u2 + g_th2 * constrain_scale(q[3], upper)[2]
    g[4] = g_y
    return lp, g


@njit(cache=True, error_model="numpy")
def micro_kernel(q, data):
    """Household-level likelihood with per-site outcome scales.

    ``data = (n, ybar, ss, x_mu, x_tau, prior, flags)`` where ``n``, ``ybar``
    and ``ss`` are (K, C, 2) sufficient statistics per site, cell and arm,
    ``x_mu``/``x_tau`` are (K, M) site covariates entering the parent means
    and ``flags[0]`` says whether each cell's parent carries a correlation.

    Layout of ``q`` (C cells)::

        mu^c, tau^c             2C   (cell-major)
        u_theta^c_1, u_theta^c_2  2C
        y_rho^c                 C    (correlated parents only)
        z^c_k1, z^c_k2          2CK  (cell-major, then site)
        u_sigma_y_k             K
        beta_mu, beta_tau       M_mu + M_tau
    """
    n, ybar, ss, x_mu, x_tau, prior, flags = data
    K = n.shape[0]
    C = n.shape[1]
    m_mu = x_mu.shape[1]
    m_tau = x_tau.shape[1]
    corr = flags[0] != 0
    g = np.zeros(q.shape[0])

    off_s = 2 * C
    off_r = 4 * C
    off_z = off_r + (C if corr else 0)
    off_y = off_z + 2 * C * K
    off_bm = off_y + K
    off_bt = off_bm + m_mu

    lp = 0.0
    rsd = prior[P_RIDGE_SD]
    shift_mu = np.zeros(K)
    shift_tau = np.zeros(K)
    for m in range(m_mu):
        b = q[off_bm + m]
        l, _, _, _ = normal_lpdf_grad(b, 0.0, rsd)
        lp += l
        g[off_bm + m] = -b / (rsd * rsd)
        for k in range(K):
            shift_mu[k] += x_mu[k, m] * b
    for m in range(m_tau):
        b = q[off_bt + m]
        l, _, _, _ = normal_lpdf_grad(b, 0.0, rsd)
        lp += l
        g[off_bt + m] = -b / (rsd * rsd)
        for k in range(K):
            shift_tau[k] += x_tau[k, m] * b

    lo = prior[P_SY_LO]
    hi = prior[P_SY_HI]
    sigma_y = np.empty(K)
    g_sy = np.zeros(K)
    for k in range(K):
        s, lj, _, dlj = constrain_interval(q[off_y + k], lo, hi)
        if not s > 0.0:
            # underflow at an extreme leapfrog state, or a non-finite one
            return -np.inf, g
        sigma_y[k] = s
        lp += lj - math.log(hi - lo)
        g[off_y + k] = dlj

    upper = prior[P_SCALE_UPPER]
    for c in range(C):
        mu = q[2 * c]
        tau = q[2 * c + 1]
        lp_m, g_mu, _, _ = normal_lpdf_grad(mu, 0.0, prior[P_HYPER_SD])
        lp_t, g_tau, _, _ = normal_lpdf_grad(tau, 0.0, prior[P_HYPER_SD])
        th1, lp1, g_u1 = _scale_prior(q[off_s + 2 * c], prior)
        th2, lp2, g_u2 = _scale_prior(q[off_s + 2 * c + 1], prior)
        lp += lp_m + lp_t + lp1 + lp2
        if corr:
            yr = q[off_r + c]
            lp_r, g_y = lkj2_tanh_lpdf_grad(yr, prior[P_ETA])
            lp += lp_r
            rho = math.tanh(yr)
            cc = 1.0 / math.cosh(yr)
        else:
            g_y = 0.0
            rho = 0.0
            cc = 1.0
        g_th1 = 0.0
        g_th2 = 0.0
        for k in range(K):
            o = off_z + 2 * (c * K + k)
            z1 = q[o]
            z2 = q[o + 1]
            lp -= 0.5 * (z1 * z1 + z2 * z2) + LOG_2PI
            mk = mu + shift_mu[k] + th1 * z1
            tk = tau + shift_tau[k] + th2 * (rho * z1 + cc * z2)
            gm = 0.0
            gt = 0.0
            for arm in range(2):
                nn = n[k, c, arm]
                if nn > 0.0:
                    l, d_mean, d_sd = normal_suffstat_lpdf_grad(
                        nn, ybar[k, c, arm], ss[k, c, arm], mk + arm * tk, sigma_y[k])
                    lp += l
                    gm += d_mean
                    gt += arm * d_mean
                    g_sy[k] += d_sd
            g_mu += gm
            g_tau += gt
            for m in range(m_mu):
                g[off_bm + m] += gm * x_mu[k, m]
            for m in range(m_tau):
                g[off_bt + m] += gt * x_tau[k, m]
            g_th1 += gm * z1
            g_th2 += gt * (rho * z1 + cc * z2)
            if corr:
                g_y += gt * th2 * (cc * cc * z1 - rho * cc * z2)
            g[o] = gm * th1 + gt * th2 * rho - z1
            g[o + 1] = gt * th2 * cc - z2
        g[2 * c] = g_mu
        g[2 * c + 1] = g_tau
        g[off_s + 2 * c] = g_u1 + g_th1 * constrain_scale(q[off_s + 2 * c], upper)[2]
        g[off_s + 2 * c + 1] = g_u2 + g_th2 * constrain_scale(q[off_s + 2 * c + 1], upper)[2]
        if corr:
            g[off_r + c] = g_y
    for k in range(K):
        g[off_y + k] += g_sy[k] * constrain_interval(q[off_y + k], lo, hi)[2]
    return lp, g


@njit(cache=True, error_model="numpy")
def gaussian_kernel(q, data):
    """Multivariate normal test target; ``data = (mean, precision)``."""
    mean, prec = data
    g = -(prec @ (q - mean))
    return 0.5 * np.dot(q - mean, g), g


FAM_RUBIN = 0
FAM_SUMMARY = 1
FAM_MICRO = 2
FAM_GAUSSIAN = 3


@njit(cache=True, error_model="numpy")
def model_kernel(q, data):
    """Dispatch on ``data[0][0]`` to the kernel whose data slot is filled.

    Packing every family into one fixed tuple type lets the sampler be
    compiled once and cached on disk.
    """
    code = data[0][0]
    if code == FAM_RUBIN:
        return rubin_kernel(q, data[1])
    if code == FAM_SUMMARY:
        return summary_joint_kernel(q, data[2])
    if code == FAM_MICRO:
        return micro_kernel(q, data[3])
    return gaussian_kernel(q, data[4])


def _vec(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def pack(rubin=None, summary=None, micro=None, gaussian=None) -> tuple:
    """Kernel data tuple for :func:`model_kernel`; exactly one slot is given."""
    given = [x is not None for x in (rubin, summary, micro, gaussian)]
    if sum(given) != 1:
        raise ValueError("pack exactly one family's data")
    e1 = np.zeros(0)
    prior0 = np.zeros(N_PRIOR)
    r = tuple(_vec(a) for a in rubin) if rubin is not None else (e1, e1, prior0)
    s = tuple(_vec(a) for a in summary) if summary is not None else (e1, e1, e1, e1, prior0)
    if micro is not None:
        m = tuple(_vec(a) for a in micro[:6]) + (np.ascontiguousarray(micro[6], dtype=np.int64),)
    else:
        e3 = np.zeros((0, 0, 2))
        m = (e3, e3, e3, np.zeros((0, 0)), np.zeros((0, 0)), prior0, np.zeros(1, dtype=np.int64))
    if gaussian is not None:
        g = (_vec(gaussian[0]), np.ascontiguousarray(gaussian[1], dtype=np.float64))
    else:
        g = (e1, np.zeros((0, 0)))
    code = given.index(True)
    return (np.array([code], dtype=np.int64), r, s, m, g)
