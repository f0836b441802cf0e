"""Sampler front end: configuration, targets, multi-chain runs and draw storage."""

from __future__ import annotations

import importlib.util
import logging
import sys
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from numba import njit
from numba.core.registry import CPUDispatcher

from ..models.kernels import model_kernel
from . import nuts
from .diagnostics import MIN_ITERATIONS, ess_and_mcse, split_rhat

log = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
DIVERGENCE_FLAG_RATE = 0.10
MAX_INIT_ATTEMPTS = 100
STAT_NAMES = ("lp__", "accept_stat__", "stepsize__", "treedepth__", "n_leapfrog__", "divergent__")


class InitializationError(RuntimeError):
    """No finite starting point was found."""


class GradientCheckError(RuntimeError):
    """The analytic gradient disagrees with finite differences at the start point."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    iterations: int = 1000
    target_accept: float = 0.8
    max_depth: int = 10
    seed: int = 0
    init_radius: float = 2.0
    adapt_metric: bool = True
    check_gradient: bool = True
    gradient_rtol: float = 1e-4

    def __post_init__(self):
        for name in ("chains", "iterations", "max_depth"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if int(self.warmup) < 0:
            raise ValueError("warmup must be non-negative")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if not self.init_radius > 0.0:
            raise ValueError("init_radius must be positive")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")


_SPECIALIZED: dict[int, dict] = {}


def specialize(fn):
    """The NUTS functions compiled against target ``fn``.

    The packed model kernel uses the cached module; any other density gets
    its own, uncached copy of the sampler source.
    """
    if fn is model_kernel:
        return nuts.run_chain
    entry = _SPECIALIZED.get(id(fn))
    if entry is None or entry["fn"] is not fn:
        # numba resolves recursive calls through sys.modules, so register the copy
        name = f"{nuts.__name__}_custom{len(_SPECIALIZED)}"
        spec = importlib.util.spec_from_file_location(name, nuts.__file__)
        module = importlib.util.module_from_spec(spec)
        module._CUSTOM_TARGET = fn
        sys.modules[name] = module
        spec.loader.exec_module(module)
        entry = {"fn": fn, "run_chain": module.run_chain}
        _SPECIALIZED[id(fn)] = entry
    return entry["run_chain"]


def _identity_readout(dim: int):
    names = [f"x_{i + 1}" for i in range(dim)]

    def readout(u):
        return names, np.asarray(u, dtype=float)

    return readout


@dataclass
class TargetDensity:
    """An unconstrained log density with its gradient.

    ``fn(q, data) -> (lp, grad)`` must be numba-compilable; plain Python
    functions are compiled on construction.  Model targets use the packed
    kernel of :mod:`sitepool.models.kernels`, whose sampler is cached.
    ``readout`` maps unconstrained draws (..., dim) to
    ``(names, constrained values (..., P))``.
    """

    dim: int
    fn: Callable
    data: tuple = ()
    readout: Callable | None = None
    constant_names: frozenset = frozenset()

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError("dimension must be positive")
        if not isinstance(self.fn, CPUDispatcher):
            try:
                self.fn = njit(self.fn, error_model="numpy")
            except Exception as exc:  # pragma: no cover - njit wraps lazily
                raise TypeError("target density must be numba-compilable") from exc
        if self.readout is None:
            self.readout = _identity_readout(self.dim)
        self.constant_names = frozenset(self.constant_names)

    def logp_grad(self, q):
        q = np.ascontiguousarray(q, dtype=float)
        if q.shape != (self.dim,):
            raise ValueError(f"point must have shape ({self.dim},)")
        try:
            lp, g = self.fn(q, self.data)
        except Exception as exc:
            if type(exc).__module__.startswith("numba"):
                raise TypeError(f"target density failed to compile: {exc}") from exc
            raise
        g = np.asarray(g, dtype=float)
        if g.shape != (self.dim,):
            raise ValueError("gradient dimension differs from point dimension")
        return float(lp), g

    @classmethod
    def from_model(cls, model) -> "TargetDensity":
        return cls(model.dim, model.kernel, model.kernel_data, model.constrain,
                   frozenset(model.constant_names()))


def finite_difference_gradient(f, q, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function with unit-scaled steps."""
    q = np.asarray(q, dtype=float)
    out = np.empty_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        out[i] = (f(q + e) - f(q - e)) / (2.0 * h)
    return out


def check_gradient(target: TargetDensity, q, rtol: float = 1e-4, h: float = 1e-6) -> float:
    """Compare the analytic gradient with central differences at ``q``.

    Returns the largest relative error ``|g - fd| / max(1, |g|)``;
    raises :class:`GradientCheckError` when it exceeds ``rtol``.
    """
    _, g = target.logp_grad(q)
    fd = finite_difference_gradient(lambda x: target.logp_grad(x)[0], q, h)
    err = float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g))))
    if not err <= rtol:
        worst = int(np.argmax(np.abs(g - fd) / np.maximum(1.0, np.abs(g))))
        raise GradientCheckError(
            f"gradient check failed at component {worst}: analytic {g[worst]:.6g}, "
            f"finite difference {fd[worst]:.6g} (relative error {err:.2e})")
    return err


def chain_rngs(seed: int, chains: int) -> list[np.random.Generator]:
    """Independent per-chain streams spawned from the master seed.

    Chain ``i`` always gets the ``i``-th spawned stream, so adding chains
    leaves existing chains untouched.
    """
    children = np.random.SeedSequence(int(seed)).spawn(int(chains))
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def find_initial_point(target: TargetDensity, rng: np.random.Generator, radius: float) -> np.ndarray:
    for _ in range(MAX_INIT_ATTEMPTS):
        q = rng.uniform(-radius, radius, target.dim)
        lp, g = target.logp_grad(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return q
    raise InitializationError(
        f"log density not finite at any of {MAX_INIT_ATTEMPTS} random initial points")


@dataclass
class PosteriorDraws:
    """Constrained draws (chains, iterations, parameters) with diagnostics."""

    names: list[str]
    draws: np.ndarray
    seed: int | None = None
    stats: np.ndarray | None = None
    stepsizes: np.ndarray | None = None
    inv_metrics: np.ndarray | None = None
    constant_names: frozenset = frozenset()
    rhat: np.ndarray = field(init=False)
    ess: np.ndarray = field(init=False)
    mcse: np.ndarray = field(init=False)

    def __post_init__(self):
        self.names = list(self.names)
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ValueError("draws must be (chains, iterations, parameters) matching names")
        if len(set(self.names)) != len(self.names):
            raise ValueError("parameter names must be unique")
        self.constant_names = frozenset(self.constant_names)
        P = len(self.names)
        self.rhat = np.full(P, np.nan)
        self.ess = np.full(P, np.nan)
        self.mcse = np.full(P, np.nan)
        if self.n_iterations >= MIN_ITERATIONS:
            for j in range(P):
                x = self.draws[:, :, j]
                self.rhat[j] = split_rhat(x)
                self.ess[j], self.mcse[j] = ess_and_mcse(x)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iterations(self) -> int:
        return self.draws.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def __getitem__(self, name: str) -> np.ndarray:
        """All draws of one parameter, chains concatenated."""
        return self.draws[:, :, self.index(name)].reshape(-1)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        cols = self.names if names is None else names
        return np.stack([self[n] for n in cols], axis=-1)

    @property
    def divergences(self) -> int:
        if self.stats is None:
            return 0
        return int(self.stats[..., nuts.ST_DIVERGENT].sum())

    @property
    def divergence_rate(self) -> float:
        if self.stats is None or self.stats.size == 0:
            return 0.0
        return float(self.stats[..., nuts.ST_DIVERGENT].mean())

    @property
    def divergence_flag(self) -> bool:
        return self.divergence_rate > DIVERGENCE_FLAG_RATE

    @property
    def checked_names(self) -> list[str]:
        """Reported parameters that enter the convergence verdict."""
        return [n for n in self.names if n not in self.constant_names]

    @property
    def max_rhat(self) -> float:
        idx = [self.index(n) for n in self.checked_names]
        if not idx:
            return float("nan")
        vals = self.rhat[idx]
        return float("nan") if np.any(np.isnan(vals)) else float(vals.max())

    @property
    def converged(self) -> bool:
        """``True`` when every non-constant parameter has R-hat below 1.1."""
        if self.n_iterations < MIN_ITERATIONS:
            return False
        return bool(self.max_rhat < RHAT_THRESHOLD)

    @property
    def verdict(self) -> str:
        return "pass" if self.converged else "fail"

    def summary(self) -> pd.DataFrame:
        flat = self.draws.reshape(-1, len(self.names))
        return pd.DataFrame(
            {"mean": flat.mean(axis=0), "sd": flat.std(axis=0, ddof=1),
             "rhat": self.rhat, "ess": self.ess, "mcse": self.mcse},
            index=pd.Index(self.names, name="parameter"))

    def to_frame(self) -> pd.DataFrame:
        C, N, P = self.draws.shape
        df = pd.DataFrame(self.draws.reshape(C * N, P), columns=self.names)
        df.insert(0, "iter", np.tile(np.arange(1, N + 1), C))
        df.insert(0, "chain", np.repeat(np.arange(1, C + 1), N))
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, constant_names=()) -> "PosteriorDraws":
        df = pd.read_csv(path, float_precision="round_trip")
        if "chain" not in df.columns or "iter" not in df.columns:
            raise ValueError(f"{path}: draws CSV needs chain and iter columns")
        df = df.sort_values(["chain", "iter"], kind="stable")
        names = [c for c in df.columns if c not in ("chain", "iter")]
        chains = df["chain"].unique()
        counts = df.groupby("chain").size()
        if counts.nunique() != 1:
            raise ValueError(f"{path}: chains have unequal lengths")
        arr = df[names].to_numpy(dtype=float).reshape(len(chains), int(counts.iloc[0]), len(names))
        return cls(names, arr, constant_names=constant_names)


def nuts_sample(target: TargetDensity, config: SamplerConfig = SamplerConfig()) -> PosteriorDraws:
    """Run ``config.chains`` independent NUTS chains on ``target``."""
    rngs = chain_rngs(config.seed, config.chains)
    run_chain = specialize(target.fn)
    unconstrained, stats, steps, metrics = [], [], [], []
    for c, rng in enumerate(rngs):
        q0 = find_initial_point(target, rng, config.init_radius)
        if config.check_gradient and c == 0:
            check_gradient(target, q0, rtol=config.gradient_rtol)
        draws, st, eps, inv_m = run_chain(
            target.data, q0, int(config.warmup), int(config.iterations),
            float(config.target_accept), int(config.max_depth), bool(config.adapt_metric), rng)
        unconstrained.append(draws)
        stats.append(st[int(config.warmup):])
        steps.append(eps)
        metrics.append(inv_m)
    u = np.stack(unconstrained)
    names, values = target.readout(u)
    if values.ndim == 2:
        values = values[..., None]
    result = PosteriorDraws(names, values, seed=config.seed, stats=np.stack(stats),
                            stepsizes=np.array(steps), inv_metrics=np.stack(metrics),
                            constant_names=target.constant_names)
    if result.divergence_flag:
        log.warning("divergent transitions in %.1f%% of iterations", 100 * result.divergence_rate)
    return result


def run_chains(model, data=None, config: SamplerConfig = SamplerConfig(),
               site_covariates=None) -> PosteriorDraws:
    """Fit a model to data.

    ``model`` is either a bound :class:`~sitepool.models.Model` or a
    :class:`~sitepool.models.ModelSpec` to be bound to ``data``.
    """
    from ..models import Model, build_model

    if not isinstance(model, Model):
        model = build_model(model, data, site_covariates)
    return nuts_sample(TargetDensity.from_model(model), config)
