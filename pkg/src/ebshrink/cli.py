"""Command-line interface: eb fit | posterior | adjust | simulate | evaluate.

Exit codes: 0 success, 2 parse or config error, 3 collapsed mixture
component, 4 shape mismatch, 5 singular information matrix. The EB_LOG
environment variable (DEBUG, INFO, WARNING, ...) controls verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .adjustment import AdjustMethod, Constant, InfoMat, LowerBound, adjust_prior
from .errors import (
    DegenerateComponent,
    DimensionMismatch,
    EbshrinkError,
    ParseError,
    SingularInformation,
)
from .fitting import EmConfig, EmTrace, em_fit
from .posterior import fsp, posterior_stats, reject_at_level, s_values
from .simulation import PRESET_NAMES, Preset, get_preset, run_preset

logger = logging.getLogger("ebshrink")

EXIT_PARSE = 2
EXIT_DEGENERATE = 3
EXIT_SHAPE = 4
EXIT_SINGULAR = 5


def _configure_logging() -> None:
    level_name = os.environ.get("EB_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_ranks(text: str | None, k: int) -> tuple[int, ...] | None:
    if text is None:
        return None
    parts = [int(p) for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        return tuple(parts * k)
    if len(parts) != k:
        raise ParseError(f"--rank needs 1 or {k} values, got {len(parts)}")
    return tuple(parts)


def _parse_alphas(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ParseError(f"--alpha: {exc}") from None
    if not values:
        raise ParseError("--alpha: no levels given")
    return values


def _method_from_args(args) -> AdjustMethod:
    if args.method == "constant":
        return Constant(args.const)
    if args.method == "info-mat":
        return InfoMat(args.alpha)
    return LowerBound(args.multiplier)


def cmd_fit(args) -> int:
    data = io.load_observations(args.data, args.noise)
    ranks = _parse_ranks(args.rank, args.k)
    init = {"random": "random_full_rank_psd", "pca": "pca_rank1"}[args.init]
    config = EmConfig(
        max_iters=args.max_iters, tol=args.tol, rank_constraints=ranks, seed=args.seed, init=init
    )
    prior, trace = em_fit(data, args.k, config)
    fit_desc = {
        "k": args.k,
        "rank_constraints": list(ranks) if ranks else None,
        "max_iters": args.max_iters,
        "tol": args.tol,
        "seed": args.seed,
        "init": args.init,
        "data": str(args.data),
        "noise": str(args.noise),
    }
    metadata = io.tool_metadata()
    metadata["fit"] = fit_desc
    metadata["fit_digest"] = io.config_digest(fit_desc)
    metadata["loglik"] = float(trace.loglik_per_iter[-1])
    metadata["effective_sizes"] = [float(v) for v in trace.effective_sizes]
    io.save_model(args.out, prior, metadata)
    trace_path = args.trace or (str(args.out) + ".trace.csv")
    with open(trace_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("iter,loglik\n")
        for i, value in enumerate(trace.loglik_per_iter):
            fh.write(f"{i},{io.fmt(value)}\n")
    print(f"fit: k={args.k} loglik={trace.loglik_per_iter[-1]:.6f} -> {args.out}")
    return 0


def cmd_posterior(args) -> int:
    data = io.load_observations(args.data, args.noise)
    prior, _ = io.load_model(args.model)
    if prior.dim != data[0].dim:
        raise DimensionMismatch(
            f"model dimension {prior.dim} does not match data dimension {data[0].dim}"
        )
    stats = posterior_stats(data, prior)
    s_vals = s_values(stats.lfsr)
    io.write_posterior_csv(args.out, stats.mean, stats.neg_prob, stats.lfsr, s_vals)
    print(f"posterior: {stats.mean.shape[0]} x {stats.mean.shape[1]} effects -> {args.out}")
    return 0


def cmd_adjust(args) -> int:
    prior, metadata = io.load_model(args.model)
    method = _method_from_args(args)
    if isinstance(method, Constant):
        adjusted = adjust_prior(prior, None, None, method)
    else:
        data = io.load_observations(args.data, args.noise)
        if data[0].dim != prior.dim:
            raise DimensionMismatch(
                f"model dimension {prior.dim} does not match data dimension {data[0].dim}"
            )
        # Responsibilities are recomputed from the model itself; at an EM
        # fixed point they equal the final E-step of the fit.
        stats = posterior_stats(data, prior)
        trace = EmTrace(
            loglik_per_iter=np.array([]),
            responsibilities=stats.comp_weights,
            effective_sizes=stats.comp_weights.sum(axis=0),
        )
        covs = np.stack([obs.v for obs in data])
        adjusted = adjust_prior(prior, trace, covs, method)
    metadata = dict(metadata)
    metadata.update(io.tool_metadata())
    metadata["adjustment"] = {
        "method": args.method,
        "const": args.const,
        "alpha": args.alpha,
        "multiplier": args.multiplier,
    }
    io.save_model(args.out, adjusted, metadata)
    print(f"adjust: method={args.method} -> {args.out}")
    return 0


def _summarize(reports) -> None:
    for name, rep in reports.items():
        mf = rep.mean_fsp()
        mp = rep.mean_power()
        for j, alpha in enumerate(rep.alpha_grid):
            print(
                f"{name}: alpha={alpha:g} mean_fsp={mf[j]:.4f} "
                f"mean_power={mp[j]:.4f} failed={len(rep.failed_reps)}"
            )


def cmd_simulate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.preset:
        try:
            preset = get_preset(
                args.preset, n_reps=args.reps, seed=args.seed, n_samples=args.n_samples
            )
        except KeyError as exc:
            raise ParseError(str(exc.args[0])) from None
    elif args.config:
        config, settings, kind, ranks = io.parse_scenario_json(args.config)
        if args.reps is not None:
            config = replace(config, n_reps=args.reps)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        if args.n_samples is not None:
            config = replace(config, n_samples=args.n_samples)
        preset = Preset("custom", kind, config, tuple(settings), ranks)
    else:
        raise ParseError("simulate needs --preset or --config")
    reports, sweep = run_preset(preset, threads=args.threads)
    if sweep is not None:
        io.write_rank_sweep_csv(out_dir / "rank_sweep.csv", sweep)
    io.write_aggregate_csv(out_dir / "aggregate.csv", reports)
    io.write_replicates_csv(out_dir / "replicates.csv", reports)
    if not args.no_figures:
        from . import plots

        plots.save_calibration_figure(reports, out_dir / "fsr_calibration.png")
        plots.save_power_figure(reports, out_dir / "fsr_power.png")
        if sweep is not None:
            plots.save_rank_sweep_figure(sweep, out_dir / "rank_sweep.png")
    _summarize(reports)
    return 0


def cmd_evaluate(args) -> int:
    mean, lfsr = io.read_posterior_csv(args.posterior)
    truth = io.read_matrix_csv(args.truth)
    if truth.shape != mean.shape:
        raise DimensionMismatch(
            f"truth shape {truth.shape} does not match posterior shape {mean.shape}"
        )
    alphas = _parse_alphas(args.alpha)
    lines = []
    for alpha in alphas:
        decisions = reject_at_level(lfsr, mean, alpha)
        if decisions.size:
            rows, cols = decisions.indices[:, 0], decisions.indices[:, 1]
            hat = float(np.mean(lfsr[rows, cols]))
            realized = fsp(decisions, truth)
        else:
            hat = float("nan")
            realized = 0.0
        lines.append((alpha, decisions.size, realized, hat, decisions.power))
        print(
            f"alpha={alpha:g} selected={decisions.size} fsp={realized:.4f} "
            f"fsr_hat={hat:.4f} power={decisions.power:.4f}"
        )
    if args.out:
        with open(args.out, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("alpha,n_selected,fsp,fsr_hat,power\n")
            for alpha, size, realized, hat, power in lines:
                fh.write(
                    f"{io.fmt(alpha)},{size},{io.fmt(realized)},{io.fmt(hat)},{io.fmt(power)}\n"
                )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eb", description="Multivariate empirical Bayes shrinkage with FSR control"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a mixture prior by EM")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--noise", default="identity")
    p_fit.add_argument("--k", type=int, required=True)
    p_fit.add_argument("--rank", help="rank constraint, one value or K comma-separated")
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument(
        "--init", choices=("random", "pca"), default="random",
        help="EM start: seeded random PD matrices, or rank-one leading eigenpairs of the data",
    )
    p_fit.add_argument("--max-iters", type=int, default=1000)
    p_fit.add_argument("--tol", type=float, default=1e-7)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--trace")
    p_fit.set_defaults(func=cmd_fit)

    p_post = sub.add_parser("posterior", help="posterior means, lfsr and s-values")
    p_post.add_argument("--data", required=True)
    p_post.add_argument("--noise", default="identity")
    p_post.add_argument("--model", required=True)
    p_post.add_argument("--out", required=True)
    p_post.set_defaults(func=cmd_posterior)

    p_adj = sub.add_parser("adjust", help="full-rank diagonal adjustment of a model")
    p_adj.add_argument("--model", required=True)
    p_adj.add_argument("--data")
    p_adj.add_argument("--noise", default="identity")
    p_adj.add_argument("--method", choices=("constant", "info-mat", "lower-bound"), required=True)
    p_adj.add_argument("--const", type=float, default=0.03)
    p_adj.add_argument("--alpha", type=float, default=0.05)
    p_adj.add_argument("--multiplier", type=float, default=2.0)
    p_adj.add_argument("--out", required=True)
    p_adj.set_defaults(func=cmd_adjust)

    p_sim = sub.add_parser("simulate", help="run a calibration experiment")
    p_sim.add_argument("--preset", help=f"one of: {', '.join(PRESET_NAMES)}")
    p_sim.add_argument("--config", help="scenario JSON file")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--n-samples", type=int)
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--no-figures", action="store_true")
    p_sim.set_defaults(func=cmd_simulate)

    p_eval = sub.add_parser("evaluate", help="score declared signs against known truth")
    p_eval.add_argument("--posterior", required=True, help="CSV from `eb posterior`")
    p_eval.add_argument("--truth", required=True, help="CSV of true effects, N x R")
    p_eval.add_argument("--alpha", required=True, help="comma-separated nominal levels")
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DegenerateComponent as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DimensionMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except SingularInformation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except (EbshrinkError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
