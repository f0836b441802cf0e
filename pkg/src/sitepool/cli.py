"""Command line front end: ``sitepool fit|validate|sbc|simulate``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, validate_config
from .data import DataError
from .models import FAMILIES
from .pipeline import EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_NONCONVERGED, EXIT_OK, run_pipeline


def _overrides(args) -> dict:
    out = {"seed": args.seed, "chains": args.chains, "iterations": args.iters,
           "warmup": args.warmup, "out_dir": args.out_dir}
    if args.family:
        out["families"] = tuple(args.family)
    if args.outcome:
        out["outcomes"] = tuple(args.outcome)
    if args.allow_nonconverged:
        out["allow_nonconverged"] = True
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int, help="post-warmup iterations per chain")
    p.add_argument("--warmup", type=int)
    p.add_argument("--family", action="append", choices=FAMILIES,
                   help="model family; repeat for several")
    p.add_argument("--outcome", action="append", help="outcome column; repeat for several")
    p.add_argument("--out-dir")
    p.add_argument("--allow-nonconverged", action="store_true",
                   help="exit 0 even when a fit fails the R-hat gate")


def _load(args, runnable: bool):
    if args.config and not os.path.isfile(args.config):
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return None, EXIT_IO
    try:
        return validate_config(args.config, _overrides(args), runnable=runnable), EXIT_OK
    except ConfigError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return None, EXIT_CONFIG


def cmd_fit(args) -> int:
    cfg, code = _load(args, runnable=False)
    if cfg is None:
        return code
    result = run_pipeline(cfg)
    for rec in result.fits:
        extra = f" ridge_sd={rec.ridge_sd:g}" if rec.ridge_sd is not None else ""
        flag = " (divergences flagged)" if rec.divergence_flag else ""
        print(f"{rec.outcome:>16s} {rec.family:<22s}{extra} max R-hat {rec.max_rhat:.4f} "
              f"{rec.verdict}{flag}")
    if result.message:
        print(f"error: {result.message}" if result.exit_code not in (EXIT_OK, EXIT_NONCONVERGED)
              else result.message, file=sys.stderr)
    if result.out_dir:
        print(f"outputs: {result.out_dir}")
    return result.exit_code


def cmd_validate(args) -> int:
    cfg, code = _load(args, runnable=args.runnable)
    if cfg is None:
        return code
    sys.stdout.write(cfg.to_text())
    return EXIT_OK


def cmd_sbc(args) -> int:
    from .models import ModelSpec
    from .oracle import SBC_FAMILIES, sbc_priors, sbc_run
    from .sampler import SamplerConfig

    family = args.family or "rubin_summary"
    if family not in SBC_FAMILIES:
        print(f"error: SBC supports {', '.join(SBC_FAMILIES)}", file=sys.stderr)
        return EXIT_CONFIG
    config = SamplerConfig(chains=args.chains, warmup=args.warmup, iterations=args.iters,
                           target_accept=0.9)
    report = sbc_run(ModelSpec(family, sbc_priors()), args.replications, K=args.sites,
                     n_per_site=args.n_per_site, config=config, seed=args.seed)
    for name, p in report.pvalues().items():
        print(f"{name:>10s} chi-square p = {p:.4f}")
    print(f"excluded {report.excluded}/{report.replications}; "
          f"{'passed' if report.passed() else 'failed'}")
    if args.out:
        report.to_json(args.out)
    return EXIT_OK if report.passed() else EXIT_NONCONVERGED


def cmd_simulate(args) -> int:
    from .oracle import SyntheticTruth, simulate_hierarchical_data

    cov = args.sigma_mu * args.sigma_tau * args.rho
    V = np.array([[args.sigma_mu**2, cov], [cov, args.sigma_tau**2]])
    se = np.full(args.sites, args.se) if args.n_per_site == 0 else None
    try:
        truth = SyntheticTruth(args.sites, args.n_per_site, args.mu, args.tau, V, args.sigma_y,
                               se=se, with_mu=args.with_mu, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sim = simulate_hierarchical_data(truth)
    try:
        sim.data.to_csv(args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitepool",
                                     description="Bayesian hierarchical aggregation of multi-site RCTs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="run the configured fits and write reports")
    _add_run_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("validate", help="check a config and print it normalized")
    _add_run_flags(p)
    p.add_argument("--runnable", action="store_true", help="also require the data a fit needs")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sbc", help="simulation-based calibration")
    p.add_argument("--family", default="rubin_summary")
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--sites", type=int, default=5)
    p.add_argument("--n-per-site", type=int, default=50)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_sbc)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--sites", type=int, default=7)
    p.add_argument("--n-per-site", type=int, default=200,
                   help="households per site; 0 writes site summaries")
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--sigma-mu", type=float, default=1.0)
    p.add_argument("--sigma-tau", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--sigma-y", type=float, default=1.0)
    p.add_argument("--se", type=float, default=1.0, help="standard error for summary output")
    p.add_argument("--with-mu", action="store_true", help="include mu_hat in summary output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
