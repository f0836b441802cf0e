"""Model families: parameter layouts, kernel data and draw readout.

A :class:`Model` binds a :class:`ModelSpec` to a dataset.  It owns the
compiled kernel plus its data tuple, knows how the unconstrained vector is
laid out, and turns unconstrained draws into the named quantities that get
reported (site effects, ``Omega``, ``theta``, ``V`` and so on).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..data import (
    CellDataset,
    DataError,
    MicroDataset,
    SiteCovariateTable,
    SummaryDataset,
    build_interaction_cells,
    fit_standardizer,
    is_standardized,
    site_control_means,
)
from ..transforms import Bounded, Identity, TanhCorr, scale_transform
from . import kernels

FAMILIES = (
    "rubin_summary",
    "joint_summary",
    "full_data_joint",
    "full_data_independent",
    "interactions",
    "site_ridge",
)
MICRO_FAMILIES = ("full_data_joint", "full_data_independent", "interactions", "site_ridge")
RIDGE_SWEEP = (0.25, 0.5, 1.0, 3.0)


class ModelSpecError(ValueError):
    """Model family and data do not fit together."""


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters.

    Defaults: hypermeans N(0, 1000^2), half-Cauchy(0, 10) scales, LKJ(3)
    correlation and sigma_y ~ U(0, 100000).  ``scale_upper`` truncates the
    half-Cauchy scale prior; ``ridge_sd`` is the standard deviation of the
    spherical prior on site-covariate slopes.
    """

    hypermean_sd: float = 1000.0
    scale_prior: float = 10.0
    scale_upper: float | None = None
    lkj_eta: float = 3.0
    sigma_y_lower: float = 0.0
    sigma_y_upper: float = 100000.0
    ridge_sd: float = 0.5
    scale_jacobian: bool = True  # False only for calibration negative controls

    def __post_init__(self):
        for name in ("hypermean_sd", "scale_prior", "lkj_eta", "ridge_sd"):
            if not getattr(self, name) > 0:
                raise ModelSpecError(f"{name} must be positive")
        if self.scale_upper is not None and not self.scale_upper > 0:
            raise ModelSpecError("scale_upper must be positive")
        if not 0 <= self.sigma_y_lower < self.sigma_y_upper:
            raise ModelSpecError("need 0 <= sigma_y_lower < sigma_y_upper")

    def as_array(self) -> np.ndarray:
        out = np.empty(kernels.N_PRIOR)
        out[kernels.P_HYPER_SD] = self.hypermean_sd
        out[kernels.P_SCALE] = self.scale_prior
        out[kernels.P_SCALE_UPPER] = math.inf if self.scale_upper is None else self.scale_upper
        out[kernels.P_ETA] = self.lkj_eta
        out[kernels.P_SY_LO] = self.sigma_y_lower
        out[kernels.P_SY_HI] = self.sigma_y_upper
        out[kernels.P_RIDGE_SD] = self.ridge_sd
        out[kernels.P_SCALE_JACOBIAN] = 1.0 if self.scale_jacobian else 0.0
        return out


@dataclass(frozen=True)
class ModelSpec:
    """Which model to fit and how.

    ``covariates`` lists household covariates for ``interactions`` or site
    covariate columns for ``site_ridge`` (all columns when empty).
    ``omit_control_mean`` drops the site control-mean regressor from the
    effect equation of ``site_ridge``; ``standardize_outcome`` defaults to
    True for ``site_ridge`` and False otherwise.
    """

    family: str
    priors: PriorConfig = field(default_factory=PriorConfig)
    covariates: tuple[str, ...] = ()
    omit_control_mean: bool = False
    standardize_outcome: bool | None = None
    max_interaction_covariates: int = 4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelSpecError(f"unknown family {self.family!r}; choose from {', '.join(FAMILIES)}")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def outcome_standardized(self) -> bool:
        if self.standardize_outcome is None:
            return self.family == "site_ridge"
        return self.standardize_outcome

    def with_priors(self, **changes) -> "ModelSpec":
        return replace(self, priors=replace(self.priors, **changes))


@dataclass(frozen=True)
class Block:
    name: str
    start: int
    size: int
    transform: object

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


@dataclass(frozen=True)
class ParamLayout:
    """Named, contiguous slices of the unconstrained vector."""

    blocks: tuple[Block, ...]

    @property
    def dim(self) -> int:
        return sum(b.size for b in self.blocks)

    def __getitem__(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks)

    def constrain(self, u) -> dict[str, np.ndarray]:
        u = np.asarray(u, dtype=float)
        return {b.name: b.transform.forward(u[..., b.slice]) for b in self.blocks}

    def unconstrain(self, values: dict) -> np.ndarray:
        lead = np.shape(next(iter(values.values())))[:-1]
        u = np.empty(lead + (self.dim,))
        for b in self.blocks:
            u[..., b.slice] = b.transform.inverse(values[b.name])
        return u

    def log_jacobian(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return sum(b.transform.log_jacobian(u[..., b.slice]) for b in self.blocks)


def _layout(*spec) -> ParamLayout:
    blocks, start = [], 0
    for name, size, transform in spec:
        if size:
            blocks.append(Block(name, start, size, transform))
            start += size
    return ParamLayout(tuple(blocks))


def _biv_site_effects(hyper, theta, rho, z, shift_mu=0.0, shift_tau=0.0):
    """Site (mu_k, tau_k) from non-centered innovations, vectorized over draws.

    ``hyper``/``theta``/``rho`` have shape (..., 2)/(..., 2)/(...,) and ``z``
    has shape (..., K, 2).
    """
    cc = np.sqrt(1.0 - rho**2)
    mu_k = hyper[..., None, 0] + shift_mu + theta[..., None, 0] * z[..., 0]
    tau_k = hyper[..., None, 1] + shift_tau + theta[..., None, 1] * (
        rho[..., None] * z[..., 0] + cc[..., None] * z[..., 1])
    return mu_k, tau_k


def _suffstats(data: MicroDataset, cell: np.ndarray, n_cells: int):
    """(K, C, 2) count, mean and centered sum of squares of the outcome."""
    K = data.K
    idx = (data.site, cell, data.treatment)
    y = data.outcome
    n = np.zeros((K, n_cells, 2))
    total = np.zeros((K, n_cells, 2))
    np.add.at(n, idx, 1.0)
    np.add.at(total, idx, y)
    ybar = np.divide(total, n, out=np.zeros_like(total), where=n > 0)
    ss = np.zeros((K, n_cells, 2))
    np.add.at(ss, idx, (y - ybar[idx]) ** 2)
    return n, ybar, ss


@dataclass
class Model:
    """A model family bound to its data, ready for the sampler."""

    spec: ModelSpec
    sites: tuple[str, ...]
    layout: ParamLayout
    kernel: object
    kernel_data: tuple
    n_cells: int = 1
    cell_labels: tuple[str, ...] = ("all",)
    beta_names: tuple[tuple[str, ...], tuple[str, ...]] = ((), ())
    outcome_scale: tuple[float, float] = (0.0, 1.0)
    notes: tuple[str, ...] = ()

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def K(self) -> int:
        return len(self.sites)

    @property
    def correlated(self) -> bool:
        return self.family in ("joint_summary", "full_data_joint", "site_ridge")

    def logp_grad(self, q):
        return self.kernel(np.asarray(q, dtype=float), self.kernel_data)

    def cell_suffix(self, c: int) -> str:
        return "" if self.n_cells == 1 else f":c{c + 1}"

    # -- readout ---------------------------------------------------------

    def constrain(self, u) -> tuple[list[str], np.ndarray]:
        """Named constrained quantities for unconstrained draws ``u`` (..., dim)."""
        u = np.asarray(u, dtype=float)
        parts = self.layout.constrain(u)
        lead = u.shape[:-1]
        cols: list[tuple[str, np.ndarray]] = []
        K = self.K
        if self.family == "rubin_summary":
            tau = parts["hyper"][..., 0]
            sig = parts["scale"][..., 0]
            tau_k = tau[..., None] + sig[..., None] * parts["z"]
            cols.append(("tau", tau))
            cols += [(f"tau_{k + 1}", tau_k[..., k]) for k in range(K)]
            cols.append(("sigma_tau", sig))
            return [c[0] for c in cols], np.stack([c[1] for c in cols], axis=-1)

        C = self.n_cells
        hyper = parts["hyper"].reshape(lead + (C, 2))
        theta = parts["scale"].reshape(lead + (C, 2))
        rho = parts["corr"].reshape(lead + (C,)) if "corr" in parts else np.zeros(lead + (C,))
        z = parts["z"].reshape(lead + (C, K, 2))
        shift_mu = shift_tau = 0.0
        if "beta_mu" in parts:
            shift_mu = parts["beta_mu"] @ self.kernel_data[3][3].T
        if "beta_tau" in parts:
            shift_tau = parts["beta_tau"] @ self.kernel_data[3][4].T
        for c in range(C):
            s = self.cell_suffix(c)
            mu_k, tau_k = _biv_site_effects(hyper[..., c, :], theta[..., c, :], rho[..., c],
                                            z[..., c, :, :], shift_mu, shift_tau)
            cols.append((f"mu{s}", hyper[..., c, 0]))
            cols.append((f"tau{s}", hyper[..., c, 1]))
            for k in range(K):
                cols.append((f"mu_{k + 1}{s}", mu_k[..., k]))
                cols.append((f"tau_{k + 1}{s}", tau_k[..., k]))
        if "sigma_y" in parts:
            cols += [(f"sigma_y_{k + 1}", parts["sigma_y"][..., k]) for k in range(K)]
        for c in range(C):
            s = self.cell_suffix(c)
            r = rho[..., c]
            t1, t2 = theta[..., c, 0], theta[..., c, 1]
            if self.correlated:
                one = np.ones_like(r)
                cols += [(f"Omega_11{s}", one), (f"Omega_12{s}", r),
                         (f"Omega_21{s}", r), (f"Omega_22{s}", one)]
            cols += [(f"theta_1{s}", t1), (f"theta_2{s}", t2)]
            cols.append((f"V_11{s}", t1 * t1))
            if self.correlated:
                cols += [(f"V_12{s}", t1 * t2 * r), (f"V_21{s}", t1 * t2 * r)]
            cols.append((f"V_22{s}", t2 * t2))
        for key, names in zip(("beta_mu", "beta_tau"), self.beta_names):
            if key in parts:
                cols += [(f"{key}:{nm}", parts[key][..., m]) for m, nm in enumerate(names)]
        return [c[0] for c in cols], np.stack([c[1] for c in cols], axis=-1)

    def constant_names(self) -> set[str]:
        """Reported quantities that are structurally constant (excluded from R-hat)."""
        out = set()
        if self.correlated:
            for c in range(self.n_cells):
                s = self.cell_suffix(c)
                out |= {f"Omega_11{s}", f"Omega_22{s}"}
        return out

    def random_point(self, rng, radius: float = 2.0) -> np.ndarray:
        return rng.uniform(-radius, radius, self.dim)


# ---------------------------------------------------------------------------
# Builders


def _scale(spec: ModelSpec):
    return scale_transform(spec.priors.scale_upper)


def _sigma_y_transform(spec: ModelSpec):
    return Bounded(spec.priors.sigma_y_lower, spec.priors.sigma_y_upper)


def rubin_data(data: SummaryDataset, priors: PriorConfig) -> tuple:
    return (np.array(data.tau_hat), np.array(data.se_tau), priors.as_array())


def build_rubin(spec: ModelSpec, data: SummaryDataset) -> Model:
    K = data.K
    layout = _layout(("hyper", 1, Identity()), ("scale", 1, _scale(spec)), ("z", K, Identity()))
    return Model(spec, data.sites, layout, kernels.model_kernel,
                 kernels.pack(rubin=rubin_data(data, spec.priors)))


def summary_joint_data(data: SummaryDataset, priors: PriorConfig) -> tuple:
    if not data.has_mu:
        raise ModelSpecError("joint_summary needs mu_hat and se_mu columns")
    return (np.array(data.mu_hat), np.array(data.se_mu), np.array(data.tau_hat),
            np.array(data.se_tau), priors.as_array())


def build_summary_joint(spec: ModelSpec, data: SummaryDataset) -> Model:
    K = data.K
    layout = _layout(("hyper", 2, Identity()), ("scale", 2, _scale(spec)),
                     ("corr", 1, TanhCorr()), ("z", 2 * K, Identity()))
    return Model(spec, data.sites, layout, kernels.model_kernel,
                 kernels.pack(summary=summary_joint_data(data, spec.priors)))


def micro_data(n, ybar, ss, priors: PriorConfig, correlated: bool,
               x_mu=None, x_tau=None) -> tuple:
    """Kernel data tuple from (K, C, 2) sufficient statistics."""
    K = n.shape[0]
    x_mu = np.zeros((K, 0)) if x_mu is None else np.ascontiguousarray(x_mu, dtype=float)
    x_tau = np.zeros((K, 0)) if x_tau is None else np.ascontiguousarray(x_tau, dtype=float)
    return (np.ascontiguousarray(n, dtype=float), np.ascontiguousarray(ybar, dtype=float),
            np.ascontiguousarray(ss, dtype=float), x_mu, x_tau, priors.as_array(),
            np.array([1 if correlated else 0], dtype=np.int64))


def micro_layout(spec: ModelSpec, K: int, n_cells: int, correlated: bool,
                 m_mu: int = 0, m_tau: int = 0) -> ParamLayout:
    C = n_cells
    return _layout(
        ("hyper", 2 * C, Identity()),
        ("scale", 2 * C, _scale(spec)),
        ("corr", C if correlated else 0, TanhCorr()),
        ("z", 2 * C * K, Identity()),
        ("sigma_y", K, _sigma_y_transform(spec)),
        ("beta_mu", m_mu, Identity()),
        ("beta_tau", m_tau, Identity()),
    )


def _standardized_outcome(spec: ModelSpec, data: MicroDataset):
    if not spec.outcome_standardized:
        return data, (0.0, 1.0)
    std = fit_standardizer(data.outcome, [data.outcome_name])
    return data.with_outcome(std.transform(data.outcome)), (float(std.mean[0]), float(std.sd[0]))


def build_full_data(spec: ModelSpec, data: MicroDataset) -> Model:
    correlated = spec.family == "full_data_joint"
    data, scale = _standardized_outcome(spec, data)
    n, ybar, ss = _suffstats(data, np.zeros(data.n_rows, dtype=np.int64), 1)
    layout = micro_layout(spec, data.K, 1, correlated)
    return Model(spec, data.sites, layout, kernels.model_kernel,
                 kernels.pack(micro=micro_data(n, ybar, ss, spec.priors, correlated)),
                 outcome_scale=scale)


def build_interactions(spec: ModelSpec, data: MicroDataset | CellDataset) -> Model:
    if isinstance(data, CellDataset):
        cells = data
    else:
        if not spec.covariates:
            raise ModelSpecError("interactions needs at least one household covariate")
        cells = build_interaction_cells(data, spec.covariates, spec.max_interaction_covariates)
    micro, scale = _standardized_outcome(spec, cells.data)
    C = cells.n_cells
    n, ybar, ss = _suffstats(micro, np.asarray(cells.cell), C)
    layout = micro_layout(spec, micro.K, C, False)
    labels = tuple(cells.cell_label(l) for l in range(C))
    return Model(spec, micro.sites, layout, kernels.model_kernel,
                 kernels.pack(micro=micro_data(n, ybar, ss, spec.priors, False)), n_cells=C,
                 cell_labels=labels, outcome_scale=scale, notes=cells.warnings)


def build_site_ridge(spec: ModelSpec, data: MicroDataset, covars: SiteCovariateTable) -> Model:
    if covars is None:
        raise ModelSpecError("site_ridge needs a site covariate table")
    table = covars.aligned_to(data.sites)
    if spec.covariates:
        table = table.select(spec.covariates)
    if not is_standardized(table.values):
        raise ModelSpecError("site_ridge needs standardized site covariates (mean 0, sd 1)")
    data, scale = _standardized_outcome(spec, data)
    x_mu = table.values
    mu_names = table.names
    if spec.omit_control_mean:
        x_tau, tau_names = table.values, table.names
    else:
        cm = site_control_means(data)
        cm = fit_standardizer(cm, ["control_mean"]).transform(cm)
        x_tau = np.column_stack([cm, table.values])
        tau_names = ("control_mean",) + table.names
    n, ybar, ss = _suffstats(data, np.zeros(data.n_rows, dtype=np.int64), 1)
    layout = micro_layout(spec, data.K, 1, True, x_mu.shape[1], x_tau.shape[1])
    return Model(spec, data.sites, layout, kernels.model_kernel,
                 kernels.pack(micro=micro_data(n, ybar, ss, spec.priors, True, x_mu, x_tau)),
                 beta_names=(mu_names, tau_names), outcome_scale=scale)


def build_model(spec: ModelSpec, data, site_covariates: SiteCovariateTable | None = None) -> Model:
    """Bind ``spec`` to ``data`` after checking they are compatible."""
    fam = spec.family
    if fam in ("rubin_summary", "joint_summary"):
        if not isinstance(data, SummaryDataset):
            raise ModelSpecError(f"{fam} needs a SummaryDataset")
        return build_rubin(spec, data) if fam == "rubin_summary" else build_summary_joint(spec, data)
    if not isinstance(data, (MicroDataset, CellDataset)):
        raise ModelSpecError(f"{fam} needs household-level data")
    if fam == "interactions":
        return build_interactions(spec, data)
    if isinstance(data, CellDataset):
        data = data.data
    if fam == "site_ridge":
        return build_site_ridge(spec, data, site_covariates)
    return build_full_data(spec, data)


# ---------------------------------------------------------------------------
# Direct log-posterior entry points


def rubin_lp(params, data: SummaryDataset, priors: PriorConfig = PriorConfig()):
    return kernels.rubin_kernel(np.asarray(params, float), rubin_data(data, priors))


def joint_summary_lp(params, data: SummaryDataset, priors: PriorConfig = PriorConfig()):
    return kernels.summary_joint_kernel(np.asarray(params, float), summary_joint_data(data, priors))


def full_data_lp(params, data: MicroDataset, priors: PriorConfig = PriorConfig()):
    return build_full_data(ModelSpec("full_data_joint", priors), data).logp_grad(params)


def independent_full_data_lp(params, data: MicroDataset, priors: PriorConfig = PriorConfig()):
    return build_full_data(ModelSpec("full_data_independent", priors), data).logp_grad(params)


def interactions_lp(params, data: CellDataset, priors: PriorConfig = PriorConfig()):
    return build_interactions(ModelSpec("interactions", priors), data).logp_grad(params)


def ridge_site_lp(params, data: MicroDataset, covars: SiteCovariateTable,
                  priors: PriorConfig = PriorConfig(), omit_control_mean: bool = False,
                  standardize_outcome: bool = True):
    spec = ModelSpec("site_ridge", priors, omit_control_mean=omit_control_mean,
                     standardize_outcome=standardize_outcome)
    return build_site_ridge(spec, data, covars).logp_grad(params)


def conditional_site_means(tau: float, sigma_tau: float, tau_hat: Sequence[float], se: Sequence[float]):
    """Posterior mean of each site effect given the hyperparameters (Rubin family).

    With ``(tau, sigma_tau)`` fixed, site effects are conditionally
    independent normals; their means are precision-weighted averages of the
    parent mean and the site estimate.
    """
    tau_hat = np.asarray(tau_hat, dtype=float)
    se = np.asarray(se, dtype=float)
    prec_parent = 1.0 / sigma_tau**2 if sigma_tau > 0 else math.inf
    if math.isinf(prec_parent):
        return np.full_like(tau_hat, tau)
    prec_site = 1.0 / se**2
    return (prec_parent * tau + prec_site * tau_hat) / (prec_parent + prec_site)


def check_family_data(spec: ModelSpec, data) -> None:
    """Raise :class:`ModelSpecError` when ``data`` cannot feed ``spec``."""
    if spec.family == "joint_summary" and isinstance(data, SummaryDataset) and not data.has_mu:
        raise ModelSpecError("joint_summary needs mu_hat and se_mu columns")
    if spec.family == "interactions" and not spec.covariates:
        raise ModelSpecError("interactions needs at least one household covariate")
    if spec.family in MICRO_FAMILIES and isinstance(data, SummaryDataset):
        raise ModelSpecError(f"{spec.family} needs household-level data")


__all__ = [
    "FAMILIES", "RIDGE_SWEEP", "Block", "DataError", "Model", "ModelSpec", "ModelSpecError",
    "ParamLayout", "PriorConfig", "build_model", "conditional_site_means", "full_data_lp",
    "independent_full_data_lp", "interactions_lp", "joint_summary_lp", "micro_data",
    "micro_layout", "ridge_site_lp", "rubin_lp",
]
