"""Compiled No-U-Turn sampler with a diagonal metric.

Multinomial trajectory sampling with the generalized U-turn criterion
(including the checks across merged subtrees), dual-averaging step-size
adaptation and windowed estimation of the diagonal metric during warmup.

The target is the module global ``_target(q, data) -> (lp, grad)``.  As
imported, it is the packed model kernel, and everything compiles once and is
cached on disk.  :func:`sitepool.sampler.core.specialize` re-executes this
source with ``_CUSTOM_TARGET`` bound to any other compiled density; such
copies are not cached.
"""

import math

import numpy as np
from numba import njit

from ..models.kernels import model_kernel

_target = globals().get("_CUSTOM_TARGET", model_kernel)
_CACHE = "_CUSTOM_TARGET" not in globals()

MAX_DELTA_H = 1000.0
LOG_08 = math.log(0.8)

# columns of the per-iteration statistics array
ST_LP = 0
ST_ACCEPT = 1
ST_STEPSIZE = 2
ST_DEPTH = 3
ST_LEAPFROG = 4
ST_DIVERGENT = 5
N_STATS = 6


@njit(cache=_CACHE, error_model="numpy")
def _kinetic(p, inv_m):
    return 0.5 * np.sum(p * p * inv_m)


@njit(cache=_CACHE, error_model="numpy")
def _leapfrog(data, q, p, g, eps, inv_m):
    """One leapfrog step in place; returns the new log density."""
    p += 0.5 * eps * g
    q += eps * inv_m * p
    lp, g_new = _target(q, data)
    g[:] = g_new
    p += 0.5 * eps * g
    return lp


@njit(cache=_CACHE, error_model="numpy")
def _criterion(p_sharp_minus, p_sharp_plus, rho):
    return np.dot(p_sharp_plus, rho) > 0.0 and np.dot(p_sharp_minus, rho) > 0.0


@njit(cache=_CACHE, error_model="numpy")
def _log_add(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=_CACHE, error_model="numpy")
def _build_tree(depth, data, z, eps, inv_m, H0, prop, rho,
                p_sharp_beg, p_sharp_end, p_beg, p_end, acc, rng):
    """Extend the trajectory by ``2**depth`` leapfrog steps from ``z``.

    ``z`` packs ``[q, p, g, lp]`` and is advanced in place.  ``prop``
    receives the multinomial proposal (packed ``[q, g, lp]``).  ``acc``
    accumulates ``[n_leapfrog, sum_metro_prob, divergent]``.
    Returns ``(valid, log_sum_weight)``.
    """
    d = inv_m.shape[0]
    if depth == 0:
        q = z[:d]
        p = z[d:2 * d]
        g = z[2 * d:3 * d]
        lp = _leapfrog(data, q, p, g, eps, inv_m)
        z[3 * d] = lp
        acc[0] += 1.0
        h = -lp + _kinetic(p, inv_m)
        if math.isnan(h):
            h = np.inf
        if h - H0 > MAX_DELTA_H:
            acc[2] = 1.0
        w = H0 - h
        acc[1] += 1.0 if w > 0.0 else math.exp(w)
        prop[:d] = q
        prop[d:2 * d] = g
        prop[2 * d] = lp
        p_sharp_beg[:] = inv_m * p
        p_sharp_end[:] = p_sharp_beg
        rho += p
        p_beg[:] = p
        p_end[:] = p
        return acc[2] == 0.0, w

    p_init_end = np.empty(d)
    p_sharp_init_end = np.empty(d)
    rho_init = np.zeros(d)
    valid_init, lsw_init = _build_tree(depth - 1, data, z, eps, inv_m, H0, prop, rho_init,
                                       p_sharp_beg, p_sharp_init_end, p_beg, p_init_end, acc, rng)
    if not valid_init:
        return False, lsw_init

    prop_final = np.empty(prop.shape[0])
    p_final_beg = np.empty(d)
    p_sharp_final_beg = np.empty(d)
    rho_final = np.zeros(d)
    valid_final, lsw_final = _build_tree(depth - 1, data, z, eps, inv_m, H0, prop_final,
                                         rho_final, p_sharp_final_beg, p_sharp_end, p_final_beg,
                                         p_end, acc, rng)
    if not valid_final:
        return False, lsw_final

    lsw_subtree = _log_add(lsw_init, lsw_final)
    if lsw_final > lsw_subtree:
        prop[:] = prop_final
    elif rng.random() < math.exp(lsw_final - lsw_subtree):
        prop[:] = prop_final

    rho_subtree = rho_init + rho_final
    rho += rho_subtree
    persist = _criterion(p_sharp_beg, p_sharp_end, rho_subtree)
    persist = persist and _criterion(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg)
    persist = persist and _criterion(p_sharp_init_end, p_sharp_end, rho_final + p_init_end)
    return persist, lsw_subtree


@njit(cache=_CACHE, error_model="numpy")
def _transition(data, cur, eps, inv_m, max_depth, rng, out_stats):
    """One NUTS transition from ``cur`` (packed ``[q, g, lp]``), updated in place."""
    d = inv_m.shape[0]
    p0 = rng.standard_normal(d) / np.sqrt(inv_m)
    lp0 = cur[2 * d]
    H0 = -lp0 + _kinetic(p0, inv_m)

    z_fwd = np.empty(3 * d + 1)
    z_fwd[:d] = cur[:d]
    z_fwd[d:2 * d] = p0
    z_fwd[2 * d:3 * d] = cur[d:2 * d]
    z_fwd[3 * d] = lp0
    z_bck = z_fwd.copy()

    sample = cur.copy()
    prop = np.empty(2 * d + 1)

    p_sharp_fwd_bck = inv_m * p0
    p_sharp_fwd_fwd = p_sharp_fwd_bck.copy()
    p_sharp_bck_fwd = p_sharp_fwd_bck.copy()
    p_sharp_bck_bck = p_sharp_fwd_bck.copy()
    p_fwd_bck = p0.copy()
    p_fwd_fwd = p0.copy()
    p_bck_fwd = p0.copy()
    p_bck_bck = p0.copy()
    rho = p0.copy()

    acc = np.zeros(3)
    log_sum_weight = 0.0
    depth = 0
    while depth < max_depth:
        rho_fwd = np.zeros(d)
        rho_bck = np.zeros(d)
        if rng.random() > 0.5:
            # the old trajectory becomes the backward part; its inner end is
            # the current forward end
            rho_bck[:] = rho
            p_bck_fwd[:] = p_fwd_fwd
            p_sharp_bck_fwd[:] = p_sharp_fwd_fwd
            valid, lsw_sub = _build_tree(depth, data, z_fwd, eps, inv_m, H0, prop, rho_fwd,
                                         p_sharp_fwd_bck, p_sharp_fwd_fwd, p_fwd_bck, p_fwd_fwd,
                                         acc, rng)
        else:
            rho_fwd[:] = rho
            p_fwd_bck[:] = p_bck_bck
            p_sharp_fwd_bck[:] = p_sharp_bck_bck
            valid, lsw_sub = _build_tree(depth, data, z_bck, -eps, inv_m, H0, prop, rho_bck,
                                         p_sharp_bck_fwd, p_sharp_bck_bck, p_bck_fwd, p_bck_bck,
                                         acc, rng)
        if not valid:
            break
        depth += 1
        if lsw_sub > log_sum_weight:
            sample[:] = prop
        elif rng.random() < math.exp(lsw_sub - log_sum_weight):
            sample[:] = prop
        log_sum_weight = _log_add(log_sum_weight, lsw_sub)

        rho = rho_bck + rho_fwd
        persist = _criterion(p_sharp_bck_bck, p_sharp_fwd_fwd, rho)
        persist = persist and _criterion(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck)
        persist = persist and _criterion(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd)
        if not persist:
            break

    cur[:] = sample
    n_leap = acc[0]
    out_stats[ST_LP] = sample[2 * d]
    out_stats[ST_ACCEPT] = acc[1] / n_leap if n_leap > 0 else 0.0
    out_stats[ST_STEPSIZE] = eps
    out_stats[ST_DEPTH] = depth
    out_stats[ST_LEAPFROG] = n_leap
    out_stats[ST_DIVERGENT] = acc[2]


@njit(cache=_CACHE, error_model="numpy")
def _init_stepsize(data, cur, eps, inv_m, rng):
    """Double or halve ``eps`` until one leapfrog step crosses acceptance 0.8."""
    d = inv_m.shape[0]
    direction = 0
    while True:
        q = cur[:d].copy()
        g = cur[d:2 * d].copy()
        p = rng.standard_normal(d) / np.sqrt(inv_m)
        H0 = -cur[2 * d] + _kinetic(p, inv_m)
        lp = _leapfrog(data, q, p, g, eps, inv_m)
        h = -lp + _kinetic(p, inv_m)
        if math.isnan(h):
            h = np.inf
        delta_h = H0 - h
        if direction == 0:
            direction = 1 if delta_h > LOG_08 else -1
        elif direction == 1 and not delta_h > LOG_08:
            break
        elif direction == -1 and not delta_h < LOG_08:
            break
        eps = 2.0 * eps if direction == 1 else 0.5 * eps
        if eps > 1e7:
            raise ValueError("step size diverged to infinity; the posterior may be improper")
        if eps == 0.0:
            raise ValueError("step size collapsed to zero; check the model")
    return eps


@njit(cache=_CACHE, error_model="numpy")
def _window_plan(n_warmup):
    """Stan-style adaptation buffers ``(init_buffer, term_buffer, base_window)``."""
    init_buffer = 75
    term_buffer = 50
    base_window = 25
    if n_warmup < 20:
        return 0, 0, 0
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - (init_buffer + term_buffer)
    return init_buffer, term_buffer, base_window


@njit(cache=_CACHE, error_model="numpy")
def run_chain(data, q0, n_warmup, n_samples, delta, max_depth, adapt_metric, rng):
    """Warm up and sample one chain.

    Returns ``(draws, stats, stepsize, inv_metric)`` where ``draws`` holds the
    unconstrained sampling-phase draws (n_samples, dim) and ``stats`` the
    per-iteration statistics for warmup and sampling combined.
    """
    d = q0.shape[0]
    inv_m = np.ones(d)
    cur = np.empty(2 * d + 1)
    cur[:d] = q0
    lp, g = _target(cur[:d].copy(), data)
    cur[d:2 * d] = g
    cur[2 * d] = lp

    eps = _init_stepsize(data, cur, 1.0, inv_m, rng)
    # dual averaging state
    gamma, t0, kappa = 0.05, 10.0, 0.75
    mu = math.log(10.0 * eps)
    s_bar = 0.0
    x_bar = 0.0
    counter = 0.0

    init_buffer, term_buffer, base_window = _window_plan(n_warmup)
    do_metric = adapt_metric and base_window > 0
    window_size = base_window
    next_window = init_buffer + window_size - 1
    w_n = 0
    w_mean = np.zeros(d)
    w_m2 = np.zeros(d)

    draws = np.empty((n_samples, d))
    stats = np.empty((n_warmup + n_samples, N_STATS))
    for it in range(n_warmup + n_samples):
        _transition(data, cur, eps, inv_m, max_depth, rng, stats[it])
        if it < n_warmup:
            counter += 1.0
            a = min(1.0, stats[it, ST_ACCEPT])
            eta = 1.0 / (counter + t0)
            s_bar = (1.0 - eta) * s_bar + eta * (delta - a)
            x = mu - s_bar * math.sqrt(counter) / gamma
            x_eta = counter ** (-kappa)
            x_bar = (1.0 - x_eta) * x_bar + x_eta * x
            eps = math.exp(x)

            if do_metric:
                if it >= init_buffer and it < n_warmup - term_buffer:
                    w_n += 1
                    delta_q = cur[:d] - w_mean
                    w_mean += delta_q / w_n
                    w_m2 += delta_q * (cur[:d] - w_mean)
                if it == next_window and it != n_warmup:
                    # schedule the next, doubled window
                    if next_window != n_warmup - term_buffer - 1:
                        window_size *= 2
                        next_window = it + window_size
                        if next_window != n_warmup - term_buffer - 1:
                            if next_window + 2 * window_size >= n_warmup - term_buffer:
                                next_window = n_warmup - term_buffer - 1
                    nf = float(w_n)
                    var = w_m2 / (nf - 1.0) if w_n > 1 else np.ones(d)
                    inv_m = (nf / (nf + 5.0)) * var + 1e-3 * (5.0 / (nf + 5.0))
                    w_n = 0
                    w_mean[:] = 0.0
                    w_m2[:] = 0.0
                    eps = _init_stepsize(data, cur, eps, inv_m, rng)
                    mu = math.log(10.0 * eps)
                    s_bar = 0.0
                    x_bar = 0.0
                    counter = 0.0
            if it == n_warmup - 1:
                eps = math.exp(x_bar)
        else:
            draws[it - n_warmup] = cur[:d]
    return draws, stats, eps, inv_m
