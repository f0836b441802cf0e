"""Post-sampling analytics: pooling metrics, next-site prediction and tables."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde

from .data import MicroDataset, SummaryDataset
from .sampler import PosteriorDraws

QUANTILE_COLUMNS = ("mean", "2.5%", "25%", "50%", "75%", "97.5%")
QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)
UNDEFINED_TOL = 1e-12


@dataclass(frozen=True)
class Clamped:
    """A metric confined to [0, 1]; ``raw`` keeps the unclamped value."""

    value: float
    raw: float

    @property
    def clamped(self) -> bool:
        return not np.isnan(self.raw) and self.raw != self.value

    @property
    def defined(self) -> bool:
        return not np.isnan(self.value)


def _clamp(raw: float) -> Clamped:
    if np.isnan(raw):
        return Clamped(float("nan"), float("nan"))
    return Clamped(float(min(1.0, max(0.0, raw))), float(raw))


def pooling_factor(se_k, sigma_tau_sq_post_mean):
    """Conventional pooling factor ``se^2 / (sigma_tau^2 + se^2)``.

    ``sigma_tau_sq_post_mean`` is the posterior mean of the hypervariance.
    Works elementwise on arrays of standard errors.
    """
    se_k = np.asarray(se_k, dtype=float)
    if np.any(~(se_k > 0)):
        raise ValueError("standard errors must be positive")
    if not sigma_tau_sq_post_mean >= 0:
        raise ValueError("hypervariance must be non-negative")
    se2 = se_k**2
    out = se2 / (sigma_tau_sq_post_mean + se2)
    return float(out) if out.ndim == 0 else out


def brute_force_pooling(post_mean_tau_k: float, post_mean_tau: float, ols_tau_k: float) -> Clamped:
    """Weight on the parent mean that reproduces the site's posterior mean.

    Solves ``tau_k_post = w * tau_post + (1 - w) * tau_hat_k``; undefined
    (``nan``) when the parent and no-pooling estimates coincide.
    """
    denom = post_mean_tau - ols_tau_k
    if abs(denom) < UNDEFINED_TOL:
        return Clamped(float("nan"), float("nan"))
    return _clamp((post_mean_tau_k - ols_tau_k) / denom)


def generalized_pooling(eps_draws) -> Clamped:
    """Generalized pooling factor of a (draws, K) matrix of site deviations.

    ``1 - Var_k(E[eps_k]) / E[Var_k(eps_k)]`` with cross-site variances
    using denominator K - 1.
    """
    eps = np.asarray(eps_draws, dtype=float)
    if eps.ndim != 2 or eps.shape[0] < 2 or eps.shape[1] < 2:
        raise ValueError("need a (draws >= 2, sites >= 2) matrix")
    num = float(np.var(eps.mean(axis=0), ddof=1))
    den = float(np.mean(np.var(eps, axis=1, ddof=1)))
    if not den > UNDEFINED_TOL * max(1.0, num):
        return Clamped(float("nan"), float("nan"))
    return _clamp(1.0 - num / den)


# ---------------------------------------------------------------------------
# OLS comparators


@dataclass
class OLSComparators:
    """No-pooling (per site) and full-pooling difference-in-means estimates."""

    sites: tuple[str, ...]
    estimate: np.ndarray
    se: np.ndarray
    skipped: np.ndarray
    pooled_estimate: float
    pooled_se: float

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"site": list(self.sites) + ["pooled"],
                           "estimate": np.append(self.estimate, self.pooled_estimate),
                           "se": np.append(self.se, self.pooled_se),
                           "skipped": np.append(self.skipped, False)})
        return df


def diff_in_means_hc1(y: np.ndarray, t: np.ndarray):
    """Slope of y on [1, t] and its HC1 robust standard error."""
    y0, y1 = y[t == 0], y[t == 1]
    n0, n1 = y0.size, y1.size
    if n0 < 2 or n1 < 2:
        return float("nan"), float("nan")
    n = n0 + n1
    ss0 = float(np.sum((y0 - y0.mean()) ** 2))
    ss1 = float(np.sum((y1 - y1.mean()) ** 2))
    var = (ss1 / n1**2 + ss0 / n0**2) * n / (n - 2)
    return float(y1.mean() - y0.mean()), float(np.sqrt(var))


def ols_comparators(data: MicroDataset) -> OLSComparators:
    """Per-site and pooled regressions of the outcome on treatment (HC1 se)."""
    K = data.K
    est = np.full(K, np.nan)
    se = np.full(K, np.nan)
    for k in range(K):
        rows = data.site == k
        est[k], se[k] = diff_in_means_hc1(data.outcome[rows], data.treatment[rows])
    skipped = np.isnan(est) | ~(se > 0)
    pe, pse = diff_in_means_hc1(data.outcome, data.treatment)
    return OLSComparators(data.sites, est, se, skipped, pe, pse)


def site_estimates(data) -> tuple[np.ndarray, np.ndarray]:
    """No-pooling effect estimates and standard errors for either data kind."""
    if isinstance(data, SummaryDataset):
        return np.asarray(data.tau_hat, float), np.asarray(data.se_tau, float)
    ols = ols_comparators(data)
    return ols.estimate, ols.se


# ---------------------------------------------------------------------------
# Pooling report


@dataclass
class PoolingReport:
    sites: tuple[str, ...]
    omega: np.ndarray
    omega_b: np.ndarray
    omega_b_raw: np.ndarray
    lambda_tau: Clamped
    lambda_mu: Clamped | None
    sigma_tau_sq_mean: float
    cell: str = ""

    @property
    def clamp_events(self) -> list[str]:
        events = [f"omega_b for site {s} clamped from {r:.6g}"
                  for s, r, v in zip(self.sites, self.omega_b_raw, self.omega_b)
                  if not np.isnan(r) and r != v]
        for name, lam in (("lambda_tau", self.lambda_tau), ("lambda_mu", self.lambda_mu)):
            if lam is not None and lam.clamped:
                events.append(f"{name} clamped from {lam.raw:.6g}")
        return events

    @property
    def mean_omega(self) -> float:
        return float(np.nanmean(self.omega))

    @property
    def mean_omega_b(self) -> float:
        vals = self.omega_b[~np.isnan(self.omega_b)]
        return float(vals.mean()) if vals.size else float("nan")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"site": self.sites, "omega": self.omega, "omega_b": self.omega_b,
                             "omega_b_raw": self.omega_b_raw})

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None or np.isnan(x) else float(x)

        return {
            "cell": self.cell,
            "sites": list(self.sites),
            "omega": [num(x) for x in self.omega],
            "omega_b": [num(x) for x in self.omega_b],
            "omega_b_raw": [num(x) for x in self.omega_b_raw],
            "mean_omega": num(self.mean_omega),
            "mean_omega_b": num(self.mean_omega_b),
            "lambda_tau": num(self.lambda_tau.value),
            "lambda_tau_raw": num(self.lambda_tau.raw),
            "lambda_mu": None if self.lambda_mu is None else num(self.lambda_mu.value),
            "sigma_tau_sq_posterior_mean": num(self.sigma_tau_sq_mean),
            "clamp_events": self.clamp_events,
        }


def _scale_name(draws: PosteriorDraws, suffix: str) -> str:
    return "sigma_tau" if "sigma_tau" in draws else f"theta_2{suffix}"


def pooling_report(draws: PosteriorDraws, tau_hat, se_hat, sites: Sequence[str],
                   suffix: str = "") -> PoolingReport:
    """All pooling metrics for one fit (one cell, identified by ``suffix``)."""
    K = len(sites)
    tau = draws[f"tau{suffix}"]
    tau_k = np.stack([draws[f"tau_{k + 1}{suffix}"] for k in range(K)], axis=1)
    sig2 = float(np.mean(draws[_scale_name(draws, suffix)] ** 2))
    tau_hat = np.asarray(tau_hat, float)
    se_hat = np.asarray(se_hat, float)
    omega = np.array([pooling_factor(s, sig2) if s > 0 else np.nan for s in se_hat])
    post_k = tau_k.mean(axis=0)
    post = float(tau.mean())
    ob = [brute_force_pooling(post_k[k], post, tau_hat[k]) for k in range(K)]
    lam_tau = generalized_pooling(tau_k - tau[:, None])
    lam_mu = None
    if f"mu_1{suffix}" in draws:
        mu_k = np.stack([draws[f"mu_{k + 1}{suffix}"] for k in range(K)], axis=1)
        lam_mu = generalized_pooling(mu_k - draws[f"mu{suffix}"][:, None])
    return PoolingReport(tuple(sites), omega, np.array([c.value for c in ob]),
                         np.array([c.raw for c in ob]), lam_tau, lam_mu, sig2, suffix.lstrip(":"))


# ---------------------------------------------------------------------------
# Posterior predictive for a new site


@dataclass
class PredictiveSummary:
    tau: np.ndarray
    mu: np.ndarray | None
    rejected: int
    thresholds: tuple[float, ...] = (0.0,)

    def quantiles(self, levels=QUANTILE_LEVELS) -> dict[str, dict[float, float]]:
        out = {"tau_K+1": dict(zip(levels, np.quantile(self.tau, levels)))}
        if self.mu is not None:
            out["mu_K+1"] = dict(zip(levels, np.quantile(self.mu, levels)))
        return {k: {p: float(v) for p, v in d.items()} for k, d in out.items()}

    def tail_probabilities(self) -> dict[float, float]:
        """``P(tau_K+1 < t)`` for each threshold."""
        return {float(t): float(np.mean(self.tau < t)) for t in self.thresholds}

    def to_dict(self) -> dict:
        return {"n_draws": int(self.tau.size), "rejected": self.rejected,
                "mean_tau_K+1": float(self.tau.mean()), "sd_tau_K+1": float(self.tau.std(ddof=1)),
                "quantiles": {k: {str(p): v for p, v in d.items()} for k, d in self.quantiles().items()},
                "P(tau_K+1 < t)": {str(t): p for t, p in self.tail_probabilities().items()}}


def posterior_predictive_next_site(tau, V, mu=None, seed: int = 0,
                                   thresholds: Sequence[float] = (0.0,)) -> PredictiveSummary:
    """One draw of the next site's effect per posterior draw.

    ``V`` holds per-draw parent covariances, shape (N, 2, 2) ordered
    (mu, tau), or per-draw effect variances of shape (N,) when there is no
    ``mu``.  Draws whose covariance is not positive semi-definite are
    rejected and counted.
    """
    tau = np.asarray(tau, dtype=float)
    V = np.asarray(V, dtype=float)
    rng = np.random.default_rng(seed)
    N = tau.size
    z = rng.standard_normal((N, 2))
    if V.ndim == 1:
        if mu is not None:
            raise ValueError("a bivariate prediction needs (N, 2, 2) covariances")
        ok = V >= -1e-12
        new_tau = tau + np.sqrt(np.clip(V, 0.0, None)) * z[:, 1]
        return PredictiveSummary(new_tau[ok], None, int(np.sum(~ok)), tuple(thresholds))
    if V.shape != (N, 2, 2):
        raise ValueError("V must have shape (N, 2, 2)")
    mu = np.asarray(mu, dtype=float)
    v11, v12, v22 = V[:, 0, 0], V[:, 0, 1], V[:, 1, 1]
    tol = 1e-12 * np.maximum(1.0, np.abs(V).max(axis=(1, 2)))
    l11 = np.sqrt(np.clip(v11, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        l21 = np.where(l11 > 0, v12 / l11, 0.0)
    schur = v22 - l21**2
    ok = (v11 >= -tol) & (schur >= -tol) & ((l11 > 0) | (np.abs(v12) <= tol))
    l22 = np.sqrt(np.clip(schur, 0.0, None))
    new_mu = mu + l11 * z[:, 0]
    new_tau = tau + l21 * z[:, 0] + l22 * z[:, 1]
    return PredictiveSummary(new_tau[ok], new_mu[ok], int(np.sum(~ok)), tuple(thresholds))


def predictive_from_draws(draws: PosteriorDraws, seed: int = 0, suffix: str = "",
                          thresholds: Sequence[float] = (0.0,)) -> PredictiveSummary:
    """Predictive summary from a fit's per-draw ``V`` (or ``sigma_tau``)."""
    if "sigma_tau" in draws:
        return posterior_predictive_next_site(draws["tau"], draws["sigma_tau"] ** 2,
                                              seed=seed, thresholds=thresholds)
    v12 = draws[f"V_12{suffix}"] if f"V_12{suffix}" in draws else np.zeros_like(draws[f"tau{suffix}"])
    V = np.empty(v12.shape + (2, 2))
    V[:, 0, 0] = draws[f"V_11{suffix}"]
    V[:, 1, 1] = draws[f"V_22{suffix}"]
    V[:, 0, 1] = V[:, 1, 0] = v12
    return posterior_predictive_next_site(draws[f"tau{suffix}"], V, draws[f"mu{suffix}"],
                                          seed=seed, thresholds=thresholds)


# ---------------------------------------------------------------------------
# Tables


_GROUP = {"mu": 0, "tau": 0, "sigma_y": 2, "Omega": 3, "theta": 4, "V": 5, "sigma_tau": 4}


def _order_key(name: str, position: int):
    cell = 0
    m = re.search(r":c(\d+)$", name)
    if m:
        cell = int(m.group(1))
    base = name.split(":c")[0] if m else name
    if base.startswith("beta_"):
        return (cell, 6, position, 0)
    mm = re.match(r"^(mu|tau)(?:_(\d+|K\+1))?$", base)
    if mm:
        comp = 0 if mm.group(1) == "mu" else 1
        idx = mm.group(2)
        if idx is None:
            return (cell, 0, 0, comp)
        if idx == "K+1":
            return (cell, 7, 0, comp)
        return (cell, 1, int(idx), comp)
    mm = re.match(r"^(sigma_y|Omega|theta|V)_(\d+)$", base)
    if mm:
        return (cell, _GROUP[mm.group(1)], int(mm.group(2)), 0)
    if base == "sigma_tau":
        return (cell, 4, 0, 0)
    return (cell, 8, position, 0)


def report_order(names: Sequence[str]) -> list[str]:
    """Parent means, site pairs, outcome scales, Omega, theta, V, prediction."""
    return [n for _, n in sorted((_order_key(n, i), n) for i, n in enumerate(names))]


def quantile_table(draws, names: Sequence[str] | None = None) -> pd.DataFrame:
    """Mean and type-7 quantiles per parameter, rows in reporting order.

    ``draws`` is a :class:`PosteriorDraws` or a mapping of name to 1-d draws.
    """
    if isinstance(draws, PosteriorDraws):
        names = list(names or draws.names)
        cols = {n: draws[n] for n in names}
    else:
        names = list(names or draws.keys())
        cols = {n: np.asarray(draws[n], dtype=float).ravel() for n in names}
    rows = []
    order = report_order(names)
    for n in order:
        x = cols[n]
        if x.size == 0:
            raise ValueError(f"no draws for {n}")
        q = np.quantile(x, QUANTILE_LEVELS, method="linear")
        rows.append([float(np.mean(x)), *map(float, q)])
    return pd.DataFrame(rows, index=pd.Index(order, name="parameter"), columns=list(QUANTILE_COLUMNS))


def density_table(draws: Mapping[str, np.ndarray] | PosteriorDraws, names: Sequence[str],
                  n_points: int = 256) -> pd.DataFrame:
    """Plot-ready kernel density estimates (Silverman bandwidth) in long form."""
    frames = []
    for n in names:
        x = np.asarray(draws[n], dtype=float)
        if np.ptp(x) <= 0:
            frames.append(pd.DataFrame({"parameter": n, "x": [x[0]], "density": [np.inf]}))
            continue
        kde = gaussian_kde(x, bw_method="silverman")
        pad = 3.0 * kde.factor * x.std(ddof=1)
        grid = np.linspace(x.min() - pad, x.max() + pad, n_points)
        frames.append(pd.DataFrame({"parameter": n, "x": grid, "density": kde(grid)}))
    return pd.concat(frames, ignore_index=True)


def interval_table(draws, names: Sequence[str]) -> pd.DataFrame:
    """Posterior mean with 50% and 95% interval endpoints per parameter."""
    rows = []
    for n in names:
        x = np.asarray(draws[n], dtype=float)
        q = np.quantile(x, QUANTILE_LEVELS)
        rows.append({"parameter": n, "mean": float(x.mean()), "lo95": q[0], "lo50": q[1],
                     "hi50": q[3], "hi95": q[4]})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Ridge sweep


@dataclass
class RidgeReport:
    """Posterior-mean |beta_tau| per covariate across a penalty sweep."""

    magnitudes: pd.DataFrame  # penalties x covariates
    rankings: dict[float, list[str]]
    excluded: list[float]
    ties: dict[float, list[tuple[str, str]]]
    meaningful: dict[float, bool]

    @property
    def stable(self) -> bool:
        orders = list(self.rankings.values())
        return bool(orders) and all(o == orders[0] for o in orders)

    @property
    def order_meaningful(self) -> bool:
        return bool(self.meaningful) and all(self.meaningful.values())

    @property
    def verdict(self) -> str:
        if not self.rankings:
            return "no converged fits"
        if not self.order_meaningful:
            return "order not meaningful"
        return "stable" if self.stable else "unstable"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "stable": self.stable,
                "rankings": {str(k): v for k, v in self.rankings.items()},
                "magnitudes": {str(p): row.to_dict() for p, row in self.magnitudes.iterrows()},
                "excluded_penalties": self.excluded,
                "ties": {str(k): v for k, v in self.ties.items()},
                "order_meaningful": {str(k): v for k, v in self.meaningful.items()}}


def _disjoint_pair(lo: np.ndarray, hi: np.ndarray) -> bool:
    for i in range(lo.size):
        for j in range(i + 1, lo.size):
            if hi[i] < lo[j] or hi[j] < lo[i]:
                return True
    return False


def ridge_coefficient_report(fits: Mapping[float, PosteriorDraws], prefix: str = "beta_tau:",
                             tie_tol: float = 1e-9) -> RidgeReport:
    """Rank covariates by posterior-mean |beta| at each penalty.

    Unconverged fits are excluded.  Ties are broken by column order and
    recorded.  A penalty's ordering is deemed meaningful only when at least
    two covariates have disjoint 95% posterior intervals.
    """
    rows, rankings, ties, meaningful, excluded = {}, {}, {}, {}, []
    for pen in sorted(fits):
        fit = fits[pen]
        if not fit.converged:
            excluded.append(float(pen))
            continue
        names = [n for n in fit.names if n.startswith(prefix)]
        if not names:
            raise ValueError(f"fit at penalty {pen} has no {prefix} coefficients")
        labels = [n[len(prefix):] for n in names]
        X = np.stack([fit[n] for n in names], axis=1)
        mag = np.abs(X.mean(axis=0))
        order = sorted(range(len(labels)), key=lambda i: (-mag[i], i))
        rankings[float(pen)] = [labels[i] for i in order]
        ties[float(pen)] = [(labels[a], labels[b]) for a, b in zip(order, order[1:])
                            if abs(mag[a] - mag[b]) <= tie_tol]
        lo, hi = np.quantile(X, [0.025, 0.975], axis=0)
        meaningful[float(pen)] = _disjoint_pair(lo, hi)
        rows[float(pen)] = dict(zip(labels, mag))
    mags = pd.DataFrame.from_dict(rows, orient="index")
    mags.index.name = "penalty"
    return RidgeReport(mags, rankings, excluded, ties, meaningful)


__all__ = [
    "Clamped", "OLSComparators", "PoolingReport", "PredictiveSummary", "QUANTILE_COLUMNS",
    "RidgeReport", "report_order", "brute_force_pooling", "density_table", "generalized_pooling",
    "interval_table", "ols_comparators", "pooling_factor", "pooling_report",
    "posterior_predictive_next_site", "predictive_from_draws", "quantile_table",
    "ridge_coefficient_report", "site_estimates",
]
