"""Run configuration: a flat ``key = value`` text file.

Grammar, one setting per line::

    # comment
    key = value          # ``key: value`` is accepted too
    outcomes = profit, revenues

Lists are comma separated; booleans are ``true``/``false``; ``none``
clears an optional value.  Relative paths resolve against the config file's
directory.  Unknown keys are rejected and every error is reported at once.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .models import FAMILIES, RIDGE_SWEEP, PriorConfig
from .sampler import SamplerConfig

OUTPUT_ROOT_ENV = "SITEPOOL_OUTPUT_ROOT"


class ConfigError(ValueError):
    """One or more configuration problems."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    # data
    summaries: str | None = None
    microdata: str | None = None
    site_covariates: str | None = None
    outcomes: tuple[str, ...] = ()
    families: tuple[str, ...] = ()
    covariates: tuple[str, ...] = ()
    ridge_covariates: tuple[str, ...] = ()
    # priors
    hypermean_sd: float = 1000.0
    scale_prior: float = 10.0
    scale_upper: float | None = None
    lkj_eta: float = 3.0
    sigma_y_lower: float = 0.0
    sigma_y_upper: float = 100000.0
    ridge_sd: float = 0.5
    ridge_sweep: tuple[float, ...] = RIDGE_SWEEP
    omit_control_mean: bool = False
    standardize_outcome: bool | None = None
    # sampler
    chains: int = 4
    warmup: int = 1000
    iterations: int = 1000
    target_accept: float = 0.8
    max_depth: int = 10
    init_radius: float = 2.0
    seed: int = 0
    # analyses and output
    pooling: bool = True
    predictive: bool = True
    thresholds: tuple[float, ...] = (0.0,)
    out_dir: str | None = None
    allow_nonconverged: bool = False

    def priors(self, ridge_sd: float | None = None) -> PriorConfig:
        return PriorConfig(self.hypermean_sd, self.scale_prior, self.scale_upper, self.lkj_eta,
                           self.sigma_y_lower, self.sigma_y_upper,
                           self.ridge_sd if ridge_sd is None else ridge_sd)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.chains, self.warmup, self.iterations, self.target_accept,
                             self.max_depth, self.seed, self.init_radius)

    def resolved_families(self) -> tuple[str, ...]:
        if self.families:
            return self.families
        return ("rubin_summary",) if self.summaries else ("full_data_joint",)

    def resolved_out_dir(self) -> str:
        if self.out_dir:
            return self.out_dir
        return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "."), "sitepool-output")

    def to_text(self) -> str:
        """Normalized config with every default materialized."""
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PATH_KEYS = ("summaries", "microdata", "site_covariates", "out_dir")
_TYPES = {f.name: f.type for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _parse_value(key: str, text: str) -> Any:
    kind = _TYPES[key]
    text = text.strip()
    optional = "None" in kind
    if optional and text.lower() in ("none", ""):
        return None
    if kind.startswith("tuple"):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if "float" in kind:
            return tuple(float(t) for t in items)
        return tuple(items)
    if kind.startswith("bool"):
        if key == "standardize_outcome" and text.lower() == "auto":
            return None
        return _parse_bool(text)
    if kind.startswith("int"):
        val = float(text)
        if not val.is_integer():
            raise ValueError(f"expected an integer, got {text!r}")
        return int(val)
    if kind.startswith("float"):
        return float(text)
    return text


def _check(cfg: RunConfig) -> list[str]:
    errors = []
    for name in ("chains", "warmup", "iterations", "max_depth"):
        v = getattr(cfg, name)
        if v < (0 if name == "warmup" else 1):
            errors.append(f"{name} must be {'non-negative' if name == 'warmup' else 'positive'}")
    if cfg.seed < 0:
        errors.append("seed must be non-negative")
    if not 0 < cfg.target_accept < 1:
        errors.append("target_accept must lie in (0, 1)")
    for name in ("hypermean_sd", "scale_prior", "lkj_eta", "ridge_sd", "init_radius"):
        v = getattr(cfg, name)
        if not (v > 0 and math.isfinite(v)):
            errors.append(f"{name} must be positive")
    if cfg.scale_upper is not None and not cfg.scale_upper > 0:
        errors.append("scale_upper must be positive or none")
    if not 0 <= cfg.sigma_y_lower < cfg.sigma_y_upper:
        errors.append("need 0 <= sigma_y_lower < sigma_y_upper")
    if any(not p > 0 for p in cfg.ridge_sweep) or not cfg.ridge_sweep:
        errors.append("ridge_sweep needs positive penalties")
    for fam in cfg.families:
        if fam not in FAMILIES:
            errors.append(f"unknown family {fam!r}; choose from {', '.join(FAMILIES)}")
    if cfg.outcomes and len(set(cfg.outcomes)) != len(cfg.outcomes):
        errors.append("outcomes must be distinct")
    return errors


def runnability_errors(cfg: RunConfig) -> list[str]:
    """Problems that stop a fit: missing data paths or family requirements."""
    errors = []
    fams = cfg.resolved_families()
    summary_fams = {"rubin_summary", "joint_summary"}
    if cfg.summaries and cfg.microdata:
        errors.append("give either summaries or microdata, not both")
    if any(f in summary_fams for f in fams) and not cfg.summaries:
        errors.append("summary families need a summaries file")
    if any(f not in summary_fams for f in fams) and not cfg.microdata:
        errors.append(f"{', '.join(f for f in fams if f not in summary_fams)} need a microdata file")
    if cfg.microdata and not cfg.outcomes:
        errors.append("microdata runs need at least one outcome")
    if "interactions" in fams and not cfg.covariates:
        errors.append("interactions needs household covariates")
    if "site_ridge" in fams and not cfg.site_covariates:
        errors.append("site_ridge needs a site_covariates file")
    return errors


def parse_config_text(text: str, base_dir: str | os.PathLike = ".", overrides: dict | None = None,
                      source: str = "<config>") -> RunConfig:
    errors, values = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, val = (s.strip() for s in line.split(sep, 1))
        if key not in _TYPES:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in values:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, val)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: {key}: {exc}")
    for key in values:
        if key in _PATH_KEYS and values[key] is not None and not os.path.isabs(values[key]):
            values[key] = os.path.normpath(os.path.join(base_dir, values[key]))
    for key, val in (overrides or {}).items():
        if key not in _TYPES:
            errors.append(f"override: unknown key {key!r}")
            continue
        if val is not None:
            values[key] = _parse_value(key, val) if isinstance(val, str) and \
                not _TYPES[key].startswith("str") else val
    cfg = None
    if not errors:
        cfg = replace(_DEFAULTS, **values)
        errors += _check(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path=None, overrides: dict | None = None, runnable: bool = False) -> RunConfig:
    """Parse, default and check a config file; raises :class:`ConfigError`.

    ``path=None`` validates an empty config (all defaults plus overrides).
    With ``runnable`` set, the data a fit needs must also be configured.
    """
    if path is None:
        cfg = parse_config_text("", ".", overrides)
    else:
        p = Path(path)
        cfg = parse_config_text(p.read_text(), p.parent, overrides, str(p))
    if runnable:
        errors = runnability_errors(cfg)
        if errors:
            raise ConfigError(errors)
    return cfg
