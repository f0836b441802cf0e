"""Config-driven batch runs: load, fit, analyze and write reports."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .analysis import (
    diff_in_means_hc1,
    density_table,
    interval_table,
    ols_comparators,
    pooling_report,
    predictive_from_draws,
    quantile_table,
    ridge_coefficient_report,
)
from .config import ConfigError, RunConfig, runnability_errors
from .data import (
    DataError,
    MicroDataset,
    build_interaction_cells,
    load_microdata,
    load_site_covariates,
    load_summaries,
    standardize_columns,
)
from .models import Model, ModelSpec, ModelSpecError, build_model
from .sampler import GradientCheckError, InitializationError, PosteriorDraws, TargetDensity, nuts_sample

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NONCONVERGED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_SAMPLER = 5

TABLE_FLOAT = "%.10g"
DRAWS_FLOAT = "%.17g"


class PipelineError(RuntimeError):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class FitRecord:
    outcome: str
    family: str
    directory: str
    verdict: str
    max_rhat: float
    divergences: int
    divergence_flag: bool
    ridge_sd: float | None = None
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "family": self.family, "directory": self.directory,
                "verdict": self.verdict,
                "max_rhat": None if np.isnan(self.max_rhat) else self.max_rhat,
                "divergences": self.divergences, "divergence_flag": self.divergence_flag,
                "ridge_sd": self.ridge_sd, "notes": list(self.notes)}


@dataclass
class PipelineResult:
    exit_code: int
    out_dir: str | None
    fits: list[FitRecord] = field(default_factory=list)
    message: str = ""

    @property
    def manifest_path(self) -> str | None:
        return None if self.out_dir is None else os.path.join(self.out_dir, "manifest.json")


@dataclass
class _Job:
    outcome: str
    family: str
    model: Model
    data: object
    ridge_sd: float | None = None

    @property
    def subdir(self) -> str:
        parts = [self.outcome, self.family]
        if self.ridge_sd is not None:
            parts.append(f"ridge_sd={self.ridge_sd:g}")
        return os.path.join(*parts)


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"sitepool": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__,
            "numba": numba.__version__}


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _nan_to_none(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# loading


def _check_files(cfg: RunConfig) -> None:
    for key in ("summaries", "microdata", "site_covariates"):
        path = getattr(cfg, key)
        if path is not None and not os.path.isfile(path):
            raise PipelineError(f"{key} file not found: {path}", EXIT_IO)


def _build_jobs(cfg: RunConfig) -> list[_Job]:
    jobs = []
    fams = cfg.resolved_families()
    raw_covs = None
    if cfg.site_covariates and "site_ridge" in fams:
        raw_covs = load_site_covariates(cfg.site_covariates, cfg.ridge_covariates or None)
    if cfg.summaries:
        data = load_summaries(cfg.summaries)
        label = cfg.outcomes[0] if cfg.outcomes else "effect"
        for fam in fams:
            spec = ModelSpec(fam, cfg.priors())
            jobs.append(_Job(label, fam, build_model(spec, data), data))
        return jobs
    for outcome in cfg.outcomes:
        data = load_microdata(cfg.microdata, outcome, cfg.covariates)
        for fam in fams:
            if fam == "site_ridge":
                site_covs, _ = standardize_columns(raw_covs.aligned_to(data.sites))
                for pen in cfg.ridge_sweep:
                    spec = ModelSpec(fam, cfg.priors(ridge_sd=pen),
                                     omit_control_mean=cfg.omit_control_mean,
                                     standardize_outcome=cfg.standardize_outcome)
                    jobs.append(_Job(outcome, fam, build_model(spec, data, site_covs), data, pen))
                continue
            spec = ModelSpec(fam, cfg.priors(), covariates=cfg.covariates if fam == "interactions" else (),
                             standardize_outcome=cfg.standardize_outcome)
            jobs.append(_Job(outcome, fam, build_model(spec, data), data))
    return jobs


# ---------------------------------------------------------------------------
# per-fit reports


def _cell_estimates(job: _Job, cell: int):
    """No-pooling estimates for one cell on the model's outcome scale."""
    data = job.data
    if not isinstance(data, MicroDataset):
        return np.asarray(data.tau_hat, float), np.asarray(data.se_tau, float)
    if job.family == "interactions":
        cells = build_interaction_cells(data, job.model.spec.covariates)
        rows = cells.cell == cell
        pairs = [diff_in_means_hc1(data.outcome[rows & (data.site == k)],
                                    data.treatment[rows & (data.site == k)]) for k in range(data.K)]
        est, se = (np.array(v) for v in zip(*pairs))
    else:
        ols = ols_comparators(data)
        est, se = ols.estimate, ols.se
    _, sd = job.model.outcome_scale
    return est / sd, se / sd


def _write_fit(job: _Job, draws: PosteriorDraws, root: Path, cfg: RunConfig) -> list[str]:
    d = root / job.subdir
    d.mkdir(parents=True, exist_ok=True)
    draws.to_csv(d / "draws.csv")
    draws.summary().to_csv(d / "diagnostics.csv", float_format=TABLE_FLOAT)

    model = job.model
    extra: dict[str, np.ndarray] = {}
    predictive, pooling = {}, {}
    for c in range(model.n_cells):
        suffix = model.cell_suffix(c)
        key = suffix.lstrip(":") or "all"
        if cfg.predictive:
            pred = predictive_from_draws(draws, seed=cfg.seed, suffix=suffix,
                                         thresholds=cfg.thresholds)
            predictive[key] = pred.to_dict()
            extra[f"tau_K+1{suffix}"] = pred.tau
            if pred.mu is not None:
                extra[f"mu_K+1{suffix}"] = pred.mu
        if cfg.pooling:
            est, se = _cell_estimates(job, c)
            rep = pooling_report(draws, est, se, model.sites, suffix)
            pooling[key] = rep.to_dict()
            rep.to_frame().to_csv(d / f"pooling_{key}.csv", index=False, float_format=TABLE_FLOAT)

    cols = {n: draws[n] for n in draws.names}
    cols.update(extra)
    table = quantile_table(cols)
    table.to_csv(d / "quantiles.csv", float_format=TABLE_FLOAT)
    _write_json(d / "quantiles.json", {"columns": list(table.columns),
                                       "rows": {n: [float(v) for v in r] for n, r in table.iterrows()}})
    if predictive:
        _write_json(d / "predictive.json", _nan_to_none(predictive))
    if pooling:
        _write_json(d / "pooling.json", _nan_to_none(pooling))
    if isinstance(job.data, MicroDataset):
        ols_comparators(job.data).to_frame().to_csv(d / "ols.csv", index=False,
                                                    float_format=TABLE_FLOAT)
    plot_names = [n for n in cols if n.split(":")[0] in ("mu", "tau", "tau_K+1", "mu_K+1")]
    density_table(cols, plot_names).to_csv(d / "densities.csv", index=False,
                                           float_format=TABLE_FLOAT)
    interval_table(cols, [n for n in table.index if n.split(":")[0].startswith(("tau", "mu"))]
                   ).to_csv(d / "intervals.csv", index=False, float_format=TABLE_FLOAT)
    return [str(p) for p in sorted(d.iterdir())]


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Run every (outcome, family) fit of ``cfg`` and write the report tree.

    Returns the exit status: 0 on success, 1 when a fit fails the R-hat
    gate (unless ``allow_nonconverged``), 2 for configuration problems,
    3 for I/O, 4 for data and 5 for sampler failures.  Inputs are fully
    loaded before anything is written.
    """
    try:
        errors = runnability_errors(cfg)
        if errors:
            raise ConfigError(errors)
        _check_files(cfg)
        jobs = _build_jobs(cfg)
    except PipelineError as exc:
        return PipelineResult(exc.exit_code, None, message=str(exc))
    except ConfigError as exc:
        return PipelineResult(EXIT_CONFIG, None, message=str(exc))
    except ModelSpecError as exc:
        return PipelineResult(EXIT_CONFIG, None, message=str(exc))
    except DataError as exc:
        return PipelineResult(EXIT_DATA, None, message=str(exc))
    except OSError as exc:
        return PipelineResult(EXIT_IO, None, message=str(exc))
    except ValueError as exc:  # unparseable input files
        return PipelineResult(EXIT_DATA, None, message=str(exc))

    root = Path(cfg.resolved_out_dir())
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return PipelineResult(EXIT_IO, None, message=f"cannot create output directory: {exc}")
    (root / "config.txt").write_text(cfg.to_text())

    records: list[FitRecord] = []
    ridge_fits: dict[str, dict[float, PosteriorDraws]] = {}
    exit_code = EXIT_OK
    message = ""
    for job in jobs:
        log.info("fitting %s / %s%s", job.outcome, job.family,
                 "" if job.ridge_sd is None else f" (ridge sd {job.ridge_sd:g})")
        try:
            draws = nuts_sample(TargetDensity.from_model(job.model), cfg.sampler())
        except (InitializationError, GradientCheckError, ValueError) as exc:
            exit_code = EXIT_SAMPLER
            message = f"{job.subdir}: {exc}"
            break
        _write_fit(job, draws, root, cfg)
        records.append(FitRecord(job.outcome, job.family, job.subdir, draws.verdict, draws.max_rhat,
                                 draws.divergences, draws.divergence_flag, job.ridge_sd,
                                 tuple(job.model.notes)))
        if job.ridge_sd is not None:
            ridge_fits.setdefault(job.outcome, {})[job.ridge_sd] = draws
        if not draws.converged and not cfg.allow_nonconverged:
            exit_code = max(exit_code, EXIT_NONCONVERGED)
            message = f"{job.subdir}: R-hat gate failed (max {draws.max_rhat:.3f})"
    for outcome, fits in ridge_fits.items():
        report = ridge_coefficient_report(fits)
        _write_json(root / outcome / "site_ridge" / "ridge_report.json", _nan_to_none(report.to_dict()))

    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(root))] = _file_hash(p)
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
                "versions": _versions(), "fits": [r.to_dict() for r in records],
                "exit_code": exit_code, "files": files}
    _write_json(root / "manifest.json", _nan_to_none(manifest))
    return PipelineResult(exit_code, str(root), records, message)
