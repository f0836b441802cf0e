"""Independent checks on the sampler: grid quadrature, synthetic data and SBC.

The quadrature posterior for the normal-normal summary model integrates the
site effects out analytically, ``tau_hat_k ~ N(tau, sigma_tau^2 + se_k^2)``,
so a deterministic 2-d trapezoid grid over ``(tau, sigma_tau)`` suffices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid, trapezoid

from .data import MicroDataset, SummaryDataset
from .models import ModelSpec, PriorConfig, build_model
from .sampler import SamplerConfig, TargetDensity, nuts_sample

MAX_GRID_POINTS = 10**8
TRUNCATION_TOL = 1e-3
REFINEMENT_TOL = 1e-3


class QuadratureError(RuntimeError):
    """The quadrature grid is too small, too coarse or too large."""


@dataclass(frozen=True)
class GridSpec:
    """Bounds and point counts of the (tau, sigma_tau) grid."""

    tau_bounds: tuple[float, float]
    sigma_bounds: tuple[float, float]
    n_tau: int = 801
    n_sigma: int = 801

    def __post_init__(self):
        lo, hi = self.tau_bounds
        slo, shi = self.sigma_bounds
        if not lo < hi or not 0.0 <= slo < shi:
            raise ValueError("grid bounds must be increasing with sigma_tau >= 0")
        if self.n_tau < 3 or self.n_sigma < 3:
            raise ValueError("need at least 3 points per axis")
        if self.n_tau * self.n_sigma > MAX_GRID_POINTS:
            raise QuadratureError(f"grid exceeds {MAX_GRID_POINTS} points")

    def refined(self) -> "GridSpec":
        """Same bounds, half the spacing."""
        return replace(self, n_tau=2 * self.n_tau - 1, n_sigma=2 * self.n_sigma - 1)

    def axes(self):
        return (np.linspace(*self.tau_bounds, self.n_tau),
                np.linspace(*self.sigma_bounds, self.n_sigma))


def _conditional_tau(sigma, tau_hat, se, hyper_sd):
    """Mean and sd of tau given sigma_tau (conjugate normal update)."""
    var = sigma[:, None] ** 2 + se[None, :] ** 2
    prec = 1.0 / hyper_sd**2 + np.sum(1.0 / var, axis=1)
    mean = np.sum(tau_hat[None, :] / var, axis=1) / prec
    return mean, np.sqrt(1.0 / prec)


def _log_sigma_marginal(sigma, tau_hat, se, priors: PriorConfig):
    """Log posterior of sigma_tau with tau integrated out, up to a constant."""
    var = sigma[:, None] ** 2 + se[None, :] ** 2
    m, s = _conditional_tau(sigma, tau_hat, se, priors.hypermean_sd)
    # log of the integral over tau of prior(tau) * prod_k N(tau_hat_k; tau, var_k)
    quad = np.sum(tau_hat[None, :] ** 2 / var, axis=1) - m**2 / s**2
    lp = -0.5 * np.sum(np.log(var), axis=1) - 0.5 * quad + np.log(s)
    lp += -np.log1p((sigma / priors.scale_prior) ** 2)
    if priors.scale_upper is not None:
        lp = np.where(sigma <= priors.scale_upper, lp, -np.inf)
    return lp


def default_grid(data: SummaryDataset, priors: PriorConfig = PriorConfig(),
                 n: int = 801) -> GridSpec:
    """Bounds covering all but a negligible share of the posterior mass."""
    tau_hat = np.asarray(data.tau_hat, float)
    se = np.asarray(data.se_tau, float)
    if priors.scale_upper is not None:
        s_hi = priors.scale_upper
    else:
        # the sigma_tau tail decays polynomially; go far out
        s_hi = 200.0 * max(priors.scale_prior, float(np.ptp(tau_hat)), float(se.max()))
    sig = np.linspace(0.0, s_hi, 2001)
    m, s = _conditional_tau(sig, tau_hat, se, priors.hypermean_sd)
    lo = float(np.min(m - 9.0 * s))
    hi = float(np.max(m + 9.0 * s))
    return GridSpec((lo, hi), (0.0, s_hi), n, n)


def truncated_mass(data: SummaryDataset, grid: GridSpec, priors: PriorConfig) -> float:
    """Posterior mass outside ``grid``, computed without the grid itself."""
    tau_hat = np.asarray(data.tau_hat, float)
    se = np.asarray(data.se_tau, float)
    top = priors.scale_upper if priors.scale_upper is not None else \
        1e6 * max(grid.sigma_bounds[1], priors.scale_prior)
    # log-spaced sigma axis resolves both the core and the far tail
    small = max(1e-8, 1e-6 * top)
    sig = np.concatenate([[0.0], np.geomspace(small, top, 20001)])
    lp = _log_sigma_marginal(sig, tau_hat, se, priors)
    w = np.exp(lp - lp.max())
    total = trapezoid(w, sig)
    lo_s, hi_s = grid.sigma_bounds
    inside_sigma = (sig >= lo_s) & (sig <= hi_s)
    m, s = _conditional_tau(sig, tau_hat, se, priors.hypermean_sd)
    lo, hi = grid.tau_bounds
    p_tau = stats.norm.cdf(hi, m, s) - stats.norm.cdf(lo, m, s)
    inside = trapezoid(np.where(inside_sigma, w * p_tau, 0.0), sig)
    return float(max(0.0, 1.0 - inside / total))


@dataclass
class QuadratureResult:
    """Posterior summaries of ``tau``, ``sigma_tau`` and each ``tau_k``."""

    mean: dict[str, float]
    sd: dict[str, float]
    quantiles: dict[str, dict[float, float]]
    grid: GridSpec
    truncated_mass: float
    refinement_change: float = float("nan")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd,
                "quantiles": {k: {str(p): v for p, v in q.items()} for k, q in self.quantiles.items()},
                "truncated_mass": self.truncated_mass,
                "refinement_change": self.refinement_change}


QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)


def _grid_moments(data: SummaryDataset, grid: GridSpec, priors: PriorConfig):
    tau_hat = np.asarray(data.tau_hat, float)
    se = np.asarray(data.se_tau, float)
    tau, sig = grid.axes()
    T, S = np.meshgrid(tau, sig, indexing="ij")
    var = S[..., None] ** 2 + se**2
    lp = stats.norm.logpdf(T, 0.0, priors.hypermean_sd)
    lp = lp - np.log1p((S / priors.scale_prior) ** 2)
    lp = lp + np.sum(-0.5 * np.log(var) - 0.5 * (tau_hat - T[..., None]) ** 2 / var, axis=-1)
    if priors.scale_upper is not None:
        lp = np.where(S <= priors.scale_upper, lp, -np.inf)
    w = np.exp(lp - lp.max())
    Z = trapezoid(trapezoid(w, sig, axis=1), tau)

    def expect(f):
        return float(trapezoid(trapezoid(w * f, sig, axis=1), tau) / Z)

    mean, sd, quant = {}, {}, {}
    for name, X, axis, pts in (("tau", T, 1, tau), ("sigma_tau", S, 0, sig)):
        m1 = expect(X)
        mean[name] = m1
        sd[name] = math.sqrt(max(0.0, expect((X - m1) ** 2)))
        marg = trapezoid(w, sig if axis == 1 else tau, axis=axis) / Z
        cdf = cumulative_trapezoid(marg, pts, initial=0.0)
        cdf /= cdf[-1]
        quant[name] = {p: float(np.interp(p, cdf, pts)) for p in QUANTILE_LEVELS}

    # tau_k given (tau, sigma): conjugate mean and variance
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(len(tau_hat)):
            prec_parent = np.where(S > 0, 1.0 / S**2, np.inf)
            prec_site = 1.0 / se[k] ** 2
            cond_mean = np.where(S > 0, (prec_parent * T + prec_site * tau_hat[k])
                                 / (prec_parent + prec_site), T)
            cond_var = np.where(S > 0, 1.0 / (prec_parent + prec_site), 0.0)
            name = f"tau_{k + 1}"
            m1 = expect(cond_mean)
            mean[name] = m1
            sd[name] = math.sqrt(max(0.0, expect(cond_var + (cond_mean - m1) ** 2)))
    return mean, sd, quant


def quadrature_rubin_posterior(data: SummaryDataset, grid: GridSpec | None = None,
                               priors: PriorConfig = PriorConfig(), *, check: bool = True,
                               max_sites: int = 3) -> QuadratureResult:
    """Posterior moments and quantiles of the normal-normal model by quadrature.

    With ``check`` set, raises :class:`QuadratureError` when more than 0.1%
    of the posterior mass lies outside the grid or when halving the grid
    spacing moves any reported moment by more than 0.1%.
    """
    if data.K > max_sites:
        raise ValueError(f"quadrature oracle limited to {max_sites} sites (got {data.K})")
    grid = grid or default_grid(data, priors)
    lost = truncated_mass(data, grid, priors)
    if check and lost > TRUNCATION_TOL:
        raise QuadratureError(f"grid misses {lost:.2%} of the posterior mass; widen the bounds")
    mean, sd, quant = _grid_moments(data, grid, priors)
    change = float("nan")
    if check:
        mean2, sd2, _ = _grid_moments(data, grid.refined(), priors)
        scale = {k: max(abs(v), sd[k], 1e-12) for k, v in mean.items()}
        change = max(max(abs(mean2[k] - mean[k]) / scale[k] for k in mean),
                     max(abs(sd2[k] - sd[k]) / max(sd[k], 1e-12) for k in sd))
        if change > REFINEMENT_TOL:
            raise QuadratureError(f"halving the grid spacing changed moments by {change:.2%}")
    return QuadratureResult(mean, sd, quant, grid, lost, change)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticTruth:
    """Generating values for one synthetic multi-site dataset.

    ``mu``/``tau`` are parent means, one per cell (a scalar means one cell);
    ``V`` is the 2x2 parent covariance of (mu_k, tau_k), one per cell.
    ``n_per_site == 0`` requests summary data with standard errors ``se``.
    Household covariates are Bernoulli(``covariate_prob``) and pick the
    cell; site covariates enter the parent means through ``beta_mu`` and
    ``beta_tau``.  ``center_noise`` recenters the outcome noise within each
    site, cell and arm so sample means equal the generating means exactly.
    """

    K: int
    n_per_site: int = 0
    mu: float | Sequence[float] = 0.0
    tau: float | Sequence[float] = 0.0
    V: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    sigma_y: float | Sequence[float] = 1.0
    se: Sequence[float] | None = None
    with_mu: bool = False
    site_covariates: np.ndarray | None = None
    beta_mu: Sequence[float] = ()
    beta_tau: Sequence[float] = ()
    covariate_prob: float = 0.5
    center_noise: bool = False
    seed: int = 0

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, float))
        tau = np.atleast_1d(np.asarray(self.tau, float))
        if mu.shape != tau.shape:
            raise ValueError("mu and tau need one value per cell")
        C = tau.shape[0]
        L = int(round(math.log2(C)))
        if 2**L != C:
            raise ValueError("the number of cells must be a power of two")
        V = np.asarray(self.V, float)
        V = np.broadcast_to(V, (C, 2, 2)).copy() if V.ndim == 2 else V
        if V.shape != (C, 2, 2):
            raise ValueError("V must be 2x2 or one 2x2 matrix per cell")
        for v in V:
            if not np.allclose(v, v.T) or np.linalg.eigvalsh(v).min() < -1e-12:
                raise ValueError("V must be symmetric positive semi-definite")
        sig_y = np.broadcast_to(np.asarray(self.sigma_y, float), (self.K,)).copy()
        if self.K < 1:
            raise ValueError("need at least one site")
        if np.any(sig_y < 0):
            raise ValueError("sigma_y must be non-negative")
        if self.n_per_site == 0:
            if self.se is None or len(self.se) != self.K or np.any(np.asarray(self.se) <= 0):
                raise ValueError("summary data need K positive standard errors")
        elif self.n_per_site < 4:
            raise ValueError("need at least 4 households per site")
        for name, val in (("mu", mu), ("tau", tau), ("V", V), ("sigma_y", sig_y)):
            object.__setattr__(self, name, val)
        if self.site_covariates is not None:
            X = np.asarray(self.site_covariates, float)
            if X.shape[0] != self.K:
                raise ValueError("site covariates need one row per site")
            object.__setattr__(self, "site_covariates", X)

    @property
    def n_cells(self) -> int:
        return self.tau.shape[0]

    @property
    def n_household_covariates(self) -> int:
        return int(round(math.log2(self.n_cells)))

    @property
    def sigma_tau(self) -> np.ndarray:
        return np.sqrt(self.V[:, 1, 1])


@dataclass
class Simulation:
    """A simulated dataset with the site-level values that generated it."""

    data: MicroDataset | SummaryDataset
    truth: SyntheticTruth
    mu_k: np.ndarray  # (C, K)
    tau_k: np.ndarray  # (C, K)


def _site_effects(truth: SyntheticTruth, rng: np.random.Generator):
    C, K = truth.n_cells, truth.K
    shift_mu = np.zeros(K)
    shift_tau = np.zeros(K)
    if truth.site_covariates is not None:
        X = truth.site_covariates
        if len(truth.beta_mu):
            shift_mu = X @ np.asarray(truth.beta_mu, float)
        if len(truth.beta_tau):
            shift_tau = X @ np.asarray(truth.beta_tau, float)
    mu_k = np.empty((C, K))
    tau_k = np.empty((C, K))
    for c in range(C):
        # eigen factor tolerates singular V (e.g. no heterogeneity)
        w, U = np.linalg.eigh(truth.V[c])
        A = U * np.sqrt(np.clip(w, 0.0, None))
        z = rng.standard_normal((K, 2)) @ A.T
        mu_k[c] = truth.mu[c] + shift_mu + z[:, 0]
        tau_k[c] = truth.tau[c] + shift_tau + z[:, 1]
    return mu_k, tau_k


def simulate_hierarchical_data(truth: SyntheticTruth) -> Simulation:
    """Draw one dataset from the hierarchical model, deterministically per seed."""
    rng = np.random.default_rng(truth.seed)
    mu_k, tau_k = _site_effects(truth, rng)
    K = truth.K
    sites = tuple(str(k + 1) for k in range(K))
    if truth.n_per_site == 0:
        se = np.asarray(truth.se, float)
        tau_hat = tau_k[0] + se * rng.standard_normal(K)
        if truth.with_mu:
            mu_hat = mu_k[0] + se * rng.standard_normal(K)
            data = SummaryDataset(sites, tau_hat, se, mu_hat, se.copy())
        else:
            data = SummaryDataset(sites, tau_hat, se)
        return Simulation(data, truth, mu_k, tau_k)

    n = truth.n_per_site
    L = truth.n_household_covariates
    site = np.repeat(np.arange(K), n)
    treat = np.tile((np.arange(n) >= n // 2).astype(np.int64), K)
    X = (rng.random((K * n, L)) < truth.covariate_prob).astype(float)
    cell = (X.astype(np.int64) * (2 ** np.arange(L))).sum(axis=1) if L else np.zeros(K * n, np.int64)
    mean = mu_k[cell, site] + tau_k[cell, site] * treat
    noise = rng.standard_normal(K * n)
    if truth.center_noise:
        group = (site * truth.n_cells + cell) * 2 + treat
        sums = np.bincount(group, noise, minlength=2 * K * truth.n_cells)
        counts = np.bincount(group, minlength=2 * K * truth.n_cells)
        noise -= (sums / np.maximum(counts, 1))[group]
    y = mean + truth.sigma_y[site] * noise
    covs = {f"x{l + 1}": X[:, l] for l in range(L)}
    data = MicroDataset(sites, site, treat, y, covs)
    return Simulation(data, truth, mu_k, tau_k)


# ---------------------------------------------------------------------------
# Simulation-based calibration


SBC_FAMILIES = ("rubin_summary", "full_data_joint")


def sbc_priors() -> PriorConfig:
    """Bounded priors used both to draw truths and to fit during SBC."""
    return PriorConfig(hypermean_sd=5.0, scale_prior=1.0, scale_upper=5.0,
                       sigma_y_lower=0.5, sigma_y_upper=2.5)


def _truncated_half_cauchy(rng, scale, upper):
    return scale * math.tan(rng.random() * math.atan(upper / scale))


def draw_truth(spec: ModelSpec, K: int, n_per_site: int, rng: np.random.Generator):
    """Draw generating values from the (bounded) prior of ``spec``.

    Returns the :class:`SyntheticTruth` and a dict of the scalar values SBC
    ranks against.
    """
    p = spec.priors
    if p.scale_upper is None:
        raise ValueError("SBC needs a truncated scale prior (scale_upper)")
    seed = int(rng.integers(2**32))
    tau = rng.normal(0.0, p.hypermean_sd)
    if spec.family == "rubin_summary":
        sig = _truncated_half_cauchy(rng, p.scale_prior, p.scale_upper)
        se = math.sqrt(4.0 / n_per_site) * np.linspace(1.0, 2.0, K)
        V = np.diag([0.0, sig * sig])
        truth = SyntheticTruth(K, 0, 0.0, tau, V, se=se, seed=seed)
        return truth, {"tau": tau, "sigma_tau": sig}
    if spec.family == "full_data_joint":
        mu = rng.normal(0.0, p.hypermean_sd)
        th1 = _truncated_half_cauchy(rng, p.scale_prior, p.scale_upper)
        th2 = _truncated_half_cauchy(rng, p.scale_prior, p.scale_upper)
        rho = 2.0 * rng.beta(p.lkj_eta, p.lkj_eta) - 1.0
        V = np.array([[th1 * th1, rho * th1 * th2], [rho * th1 * th2, th2 * th2]])
        sig_y = rng.uniform(p.sigma_y_lower, p.sigma_y_upper, K)
        truth = SyntheticTruth(K, n_per_site, mu, tau, V, sigma_y=sig_y, seed=seed)
        return truth, {"mu": mu, "tau": tau, "theta_1": th1, "theta_2": th2, "Omega_12": rho}
    raise ValueError(f"SBC supports {', '.join(SBC_FAMILIES)}")


@dataclass
class SBCReport:
    family: str
    replications: int
    excluded: int
    n_draws: int
    bins: int
    ranks: dict[str, np.ndarray]
    seed: int

    @property
    def exclusion_rate(self) -> float:
        return self.excluded / self.replications

    def histograms(self) -> dict[str, np.ndarray]:
        edges = np.linspace(0, self.n_draws + 1, self.bins + 1)
        return {k: np.histogram(v, bins=edges)[0] for k, v in self.ranks.items()}

    def pvalues(self) -> dict[str, float]:
        return {k: float(stats.chisquare(h).pvalue) for k, h in self.histograms().items()}

    def passed(self, alpha: float = 0.01, max_exclusion: float = 0.05) -> bool:
        if self.exclusion_rate > max_exclusion:
            return False
        return all(p > alpha for p in self.pvalues().values())

    def to_dict(self) -> dict:
        return {"family": self.family, "replications": self.replications,
                "excluded": self.excluded, "exclusion_rate": self.exclusion_rate,
                "n_draws": self.n_draws, "bins": self.bins, "seed": self.seed,
                "pvalues": self.pvalues(),
                "histograms": {k: v.tolist() for k, v in self.histograms().items()},
                "passed": self.passed()}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def sbc_run(spec: ModelSpec, replications: int, K: int = 5, n_per_site: int = 50,
            config: SamplerConfig = SamplerConfig(chains=4, warmup=500, iterations=250,
                                                  target_accept=0.9),
            seed: int = 0, n_draws: int = 99, bins: int = 20) -> SBCReport:
    """Simulation-based calibration of ``spec`` with the NUTS sampler.

    Each replication draws a truth from the prior, simulates data, fits and
    records the rank of the truth among ``n_draws`` evenly thinned posterior
    draws.  Fits whose R-hat fails are excluded and counted.
    """
    if replications < 1:
        raise ValueError("SBC needs at least one replication")
    if (n_draws + 1) % bins:
        raise ValueError("bins must divide the number of possible ranks")
    streams = np.random.SeedSequence(seed).spawn(replications)
    ranks: dict[str, list[int]] = {}
    excluded = 0
    for r, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        truth, values = draw_truth(spec, K, n_per_site, rng)
        sim = simulate_hierarchical_data(truth)
        model = build_model(spec, sim.data)
        cfg = replace(config, seed=int(rng.integers(2**31)), check_gradient=r == 0)
        fit = nuts_sample(TargetDensity.from_model(model), cfg)
        if not fit.converged:
            excluded += 1
            continue
        total = fit.n_chains * fit.n_iterations
        idx = np.round(np.linspace(0, total - 1, n_draws)).astype(int)
        for name, val in values.items():
            ranks.setdefault(name, []).append(int(np.sum(fit[name][idx] < val)))
    if excluded == replications:
        raise RuntimeError("every SBC replication failed to converge")
    return SBCReport(spec.family, replications, excluded, n_draws, bins,
                     {k: np.array(v) for k, v in ranks.items()}, seed)
