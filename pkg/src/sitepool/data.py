"""Experiment data: loading, validation and reshaping for the models.

Sites are identified by their label in the input file and mapped to dense
integer indices in ascending label order (numeric order when every label
is an integer).  All containers are immutable after construction.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

MAX_INTERACTION_COVARIATES = 4


class DataError(ValueError):
    """Input data violates a documented invariant."""


class SchemaError(DataError):
    """A required column is missing from an input file."""


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def sort_site_labels(labels) -> list[str]:
    labels = [str(s) for s in labels]
    try:
        return sorted(labels, key=int)
    except ValueError:
        return sorted(labels)


def _index_sites(raw: pd.Series) -> tuple[tuple[str, ...], np.ndarray]:
    as_str = raw.astype(str)
    sites = tuple(sort_site_labels(pd.unique(as_str)))
    lookup = {s: i for i, s in enumerate(sites)}
    return sites, as_str.map(lookup).to_numpy(dtype=np.int64)


def _read_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return pd.read_csv(path, float_precision="round_trip", encoding="utf-8")


def _require_columns(df: pd.DataFrame, columns: Sequence[str], path) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")


def _check_binary(values: np.ndarray, what: str) -> None:
    bad = ~np.isin(values, (0, 1))
    if bad.any():
        raise DataError(f"{what} must be binary (0/1); found {np.unique(values[bad])[:5].tolist()}")


@dataclass(frozen=True)
class MicroDataset:
    """Household-level rows from K randomized experiments."""

    sites: tuple[str, ...]
    site: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    outcome_name: str = "y"
    n_dropped: int = 0

    def __post_init__(self):
        site = _frozen(self.site, np.int64)
        treatment = np.asarray(self.treatment)
        outcome = _frozen(self.outcome, float)
        if not (site.shape == treatment.shape == outcome.shape) or site.ndim != 1:
            raise DataError("site, treatment and outcome must be aligned 1-d arrays")
        _check_binary(treatment, "treatment")
        if not np.all(np.isfinite(outcome)):
            raise DataError("outcome contains missing or non-finite values")
        K = len(self.sites)
        if K < 2:
            raise DataError(f"need at least 2 sites, found {K}")
        if site.size and (site.min() < 0 or site.max() >= K):
            raise DataError("site index out of range")
        covs = {}
        for name, col in self.covariates.items():
            col = np.asarray(col)
            if col.shape != site.shape:
                raise DataError(f"covariate {name} is not aligned with the rows")
            _check_binary(col, f"covariate {name}")
            covs[name] = _frozen(col, np.int8)
        treatment = _frozen(treatment, np.int8)
        for k, label in enumerate(self.sites):
            arms = treatment[site == k]
            if not np.any(arms == 0):
                raise DataError(f"site {label} lacks control arm")
            if not np.any(arms == 1):
                raise DataError(f"site {label} lacks treatment arm")
        object.__setattr__(self, "sites", tuple(str(s) for s in self.sites))
        object.__setattr__(self, "site", site)
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "covariates", dict(covs))

    @property
    def K(self) -> int:
        return len(self.sites)

    @property
    def n_rows(self) -> int:
        return self.site.size

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(self.covariates)

    def site_counts(self) -> np.ndarray:
        """Rows per site and arm, shape (K, 2)."""
        counts = np.zeros((self.K, 2), dtype=np.int64)
        np.add.at(counts, (self.site, self.treatment), 1)
        return counts

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "site": [self.sites[k] for k in self.site],
                "treatment": self.treatment.astype(int),
                self.outcome_name: self.outcome,
            }
        )
        for name, col in self.covariates.items():
            df[name] = col.astype(int)
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def with_outcome(self, outcome, name: str | None = None) -> "MicroDataset":
        return MicroDataset(
            self.sites, self.site, self.treatment, outcome,
            self.covariates, name or self.outcome_name, self.n_dropped,
        )


def load_microdata(path, outcome: str, covariates: Sequence[str] = (),
                   schema: Mapping[str, str] | None = None) -> MicroDataset:
    """Read household rows from CSV.

    ``schema`` optionally renames file columns to the canonical ``site`` and
    ``treatment`` names (``{"village_id": "site"}``).  Rows with a missing
    outcome are dropped and counted in ``n_dropped``.
    """
    df = _read_csv(path)
    if schema:
        df = df.rename(columns=dict(schema))
    _require_columns(df, ["site", "treatment", outcome, *covariates], path)
    missing = df[outcome].isna()
    n_dropped = int(missing.sum())
    if n_dropped:
        log.info("%s: dropped %d rows with missing %s", path, n_dropped, outcome)
        df = df.loc[~missing]
    if df[["site", "treatment", *covariates]].isna().any().any():
        raise DataError(f"{path}: missing values in site, treatment or covariate columns")
    treat = df["treatment"].to_numpy()
    _check_binary(treat, "treatment")
    sites, site_idx = _index_sites(df["site"])
    covs = {c: df[c].to_numpy() for c in covariates}
    return MicroDataset(sites, site_idx, treat.astype(np.int8), df[outcome].to_numpy(dtype=float),
                        covs, outcome, n_dropped)


@dataclass(frozen=True)
class SummaryDataset:
    """Per-site effect estimates and standard errors."""

    sites: tuple[str, ...]
    tau_hat: np.ndarray
    se_tau: np.ndarray
    mu_hat: np.ndarray | None = None
    se_mu: np.ndarray | None = None

    def __post_init__(self):
        K = len(self.sites)
        if K < 2:
            raise DataError(f"need at least 2 sites, found {K}")
        tau_hat = _frozen(self.tau_hat, float)
        se_tau = _frozen(self.se_tau, float)
        if tau_hat.shape != (K,) or se_tau.shape != (K,):
            raise DataError("tau_hat and se_tau need one value per site")
        if not np.all(np.isfinite(tau_hat)):
            raise DataError("tau_hat must be finite")
        if not np.all(se_tau > 0):
            raise DataError("se_tau must be positive")
        if (self.mu_hat is None) != (self.se_mu is None):
            raise DataError("mu_hat and se_mu must be given together")
        if self.mu_hat is not None:
            mu_hat = _frozen(self.mu_hat, float)
            se_mu = _frozen(self.se_mu, float)
            if mu_hat.shape != (K,) or se_mu.shape != (K,):
                raise DataError("mu_hat and se_mu need one value per site")
            if not np.all(np.isfinite(mu_hat)):
                raise DataError("mu_hat must be finite")
            if not np.all(se_mu > 0):
                raise DataError("se_mu must be positive")
            object.__setattr__(self, "mu_hat", mu_hat)
            object.__setattr__(self, "se_mu", se_mu)
        object.__setattr__(self, "sites", tuple(str(s) for s in self.sites))
        object.__setattr__(self, "tau_hat", tau_hat)
        object.__setattr__(self, "se_tau", se_tau)

    @property
    def K(self) -> int:
        return len(self.sites)

    @property
    def has_mu(self) -> bool:
        return self.mu_hat is not None

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"site": self.sites, "tau_hat": self.tau_hat, "se_tau": self.se_tau})
        if self.has_mu:
            df["mu_hat"] = self.mu_hat
            df["se_mu"] = self.se_mu
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def load_summaries(path) -> SummaryDataset:
    df = _read_csv(path)
    _require_columns(df, ["site", "tau_hat", "se_tau"], path)
    has_mu = [c in df.columns for c in ("mu_hat", "se_mu")]
    if any(has_mu) and not all(has_mu):
        raise DataError(f"{path}: mu_hat and se_mu must be given together")
    df = df.assign(_label=df["site"].astype(str))
    order = sort_site_labels(df["_label"])
    if len(set(order)) != len(order):
        raise DataError(f"{path}: duplicate site labels")
    df = df.set_index("_label").loc[order]
    mu = (df["mu_hat"].to_numpy(float), df["se_mu"].to_numpy(float)) if all(has_mu) else (None, None)
    return SummaryDataset(tuple(order), df["tau_hat"].to_numpy(float), df["se_tau"].to_numpy(float), *mu)


@dataclass(frozen=True)
class SiteCovariateTable:
    """Site-level contextual variables, one row per site."""

    sites: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, float)
        if values.shape != (len(self.sites), len(self.names)):
            raise DataError("covariate table shape does not match its labels")
        if not np.all(np.isfinite(values)):
            raise DataError("site covariates must be finite")
        object.__setattr__(self, "sites", tuple(str(s) for s in self.sites))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def aligned_to(self, sites: Sequence[str]) -> "SiteCovariateTable":
        """Reorder rows to ``sites``; every site must be present."""
        lookup = {s: i for i, s in enumerate(self.sites)}
        missing = [s for s in sites if s not in lookup]
        if missing:
            raise DataError(f"site covariates missing for: {', '.join(missing)}")
        rows = [lookup[s] for s in sites]
        return SiteCovariateTable(tuple(sites), self.names, self.values[rows])

    def select(self, names: Sequence[str]) -> "SiteCovariateTable":
        idx = [self.names.index(n) for n in names]
        return SiteCovariateTable(self.sites, tuple(names), self.values[:, idx])


def load_site_covariates(path, columns: Sequence[str] | None = None) -> SiteCovariateTable:
    df = _read_csv(path)
    _require_columns(df, ["site", *(columns or ())], path)
    names = list(columns) if columns else [c for c in df.columns if c != "site"]
    df = df.assign(_label=df["site"].astype(str))
    order = sort_site_labels(df["_label"])
    if len(set(order)) != len(order):
        raise DataError(f"{path}: duplicate site labels")
    df = df.set_index("_label").loc[order]
    return SiteCovariateTable(tuple(order), tuple(names), df[names].to_numpy(float))


# ---------------------------------------------------------------------------
# Interaction cells


@dataclass(frozen=True)
class CellDataset:
    """Rows partitioned into the 2**L cells of L binary covariates.

    Cell ``l`` (0-based here, ``l + 1`` in reports) holds the rows whose
    covariate vector ``x`` satisfies ``l == sum(x[j] << j)``, so cell 0 is
    the all-zeros pattern.
    """

    data: MicroDataset
    covariate_names: tuple[str, ...]
    cell: np.ndarray
    patterns: np.ndarray
    counts: np.ndarray
    warnings: tuple[str, ...] = ()

    @property
    def n_cells(self) -> int:
        return self.patterns.shape[0]

    def membership(self) -> np.ndarray:
        """Indicator matrix ``X^{pi(l)}_{ik}``, shape (rows, cells)."""
        out = np.zeros((self.cell.size, self.n_cells), dtype=np.int8)
        out[np.arange(self.cell.size), self.cell] = 1
        return out

    def cell_label(self, l: int) -> str:
        if not self.covariate_names:
            return "all"
        return ",".join(f"{n}={v}" for n, v in zip(self.covariate_names, self.patterns[l]))


def cell_patterns(L: int) -> np.ndarray:
    """Little-endian binary patterns, row ``l`` encodes ``l``."""
    idx = np.arange(2**L)
    return ((idx[:, None] >> np.arange(L)[None, :]) & 1).astype(np.int8)


def build_interaction_cells(data: MicroDataset, covariate_names: Sequence[str],
                            max_covariates: int = MAX_INTERACTION_COVARIATES) -> CellDataset:
    names = tuple(covariate_names)
    L = len(names)
    if L > max_covariates:
        raise DataError(f"{L} covariates give {2**L} cells; the limit is {max_covariates} covariates")
    unknown = [n for n in names if n not in data.covariates]
    if unknown:
        raise SchemaError(f"unknown covariate(s): {', '.join(unknown)}")
    cell = np.zeros(data.n_rows, dtype=np.int64)
    for j, name in enumerate(names):
        cell += data.covariates[name].astype(np.int64) << j
    n_cells = 2**L
    counts = np.zeros((data.K, n_cells, 2), dtype=np.int64)
    np.add.at(counts, (data.site, cell, data.treatment), 1)
    notes = []
    for j, name in enumerate(names):
        col = data.covariates[name]
        for k, label in enumerate(data.sites):
            if np.unique(col[data.site == k]).size < 2:
                notes.append(f"covariate {name} is constant in site {label}")
    for k, label in enumerate(data.sites):
        for l in range(n_cells):
            if counts[k, l].min() == 0 and L:
                notes.append(f"site {label} has an empty arm in cell {l + 1}; "
                             "its cell parameters are identified by the prior")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return CellDataset(data, names, _frozen(cell), _frozen(cell_patterns(L)), _frozen(counts), tuple(notes))


# ---------------------------------------------------------------------------
# Standardization


@dataclass(frozen=True)
class Standardizer:
    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.sd

    def inverse(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.sd + self.mean


def fit_standardizer(values, names: Sequence[str]) -> Standardizer:
    """Column means and sample standard deviations (denominator n - 1)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] < 2:
        raise DataError("standardizing needs at least two rows")
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    # relative guard so columns of large constants are caught too
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if flat.any():
        bad = [n for n, f in zip(names, flat) if f]
        raise DataError(f"zero-variance column(s) cannot be standardized: {', '.join(bad)}")
    return Standardizer(tuple(names), _frozen(mean), _frozen(sd))


def standardize_columns(table: SiteCovariateTable) -> tuple[SiteCovariateTable, Standardizer]:
    std = fit_standardizer(table.values, table.names)
    return SiteCovariateTable(table.sites, table.names, std.transform(table.values)), std


def is_standardized(values, tol: float = 1e-8) -> bool:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[1] == 0:
        return True
    if values.shape[0] < 2:
        return False
    return bool(np.all(np.abs(values.mean(axis=0)) < tol)
                and np.all(np.abs(values.std(axis=0, ddof=1) - 1.0) < tol))


def site_control_means(data: MicroDataset) -> np.ndarray:
    """Control-arm outcome mean per site."""
    out = np.empty(data.K)
    for k in range(data.K):
        out[k] = data.outcome[(data.site == k) & (data.treatment == 0)].mean()
    return out


def microcredit_site_covariates() -> SiteCovariateTable:
    """Contextual variables of the seven microcredit sites, pre-standardization."""
    sites = ("Mexico", "Mongolia", "Bosnia", "India", "Morocco", "Philippines", "Ethiopia")
    names = ("rand_unit", "women", "apr", "saturation", "promotion", "collateral", "loan_size")
    values = [
        [0, 1, 100.0, 2, 1, 0, 6.0],
        [0, 1, 120.0, 1, 0, 1, 36.0],
        [1, 0, 22.0, 2, 0, 1, 9.0],
        [0, 1, 24.0, 3, 0, 0, 22.0],
        [0, 0, 13.5, 0, 1, 0, 21.0],
        [1, 0, 63.0, 1, 0, 0, 24.1],
        [0, 0, 12.0, 1, 0, 0, 118.0],
    ]
    return SiteCovariateTable(sites, names, np.array(values, dtype=float))

