"""Benchmark command line.

Subcommands: solve / oracle / compare for the pricing experiments,
check-poly and check-fd for the scheme diagnostics.  Exit codes: 0 on
success, 2 for configuration or usage problems, 3 for numerical failures.
"""

import argparse
import csv
import json
import sys

import numpy as np

from . import benchmarks, monotone_poly, scheme_ops
from .errors import ConfigurationError, NumericalError, UsageError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _add_solve(sub):
    p = sub.add_parser("solve", help="run a benchmark experiment")
    p.add_argument("--config", required=True, help="ExperimentConfig JSON file")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_solve)


def _add_oracle(sub):
    p = sub.add_parser("oracle", help="quadrature oracle on the reporting slice")
    p.add_argument("--config", required=True, help="ExperimentConfig JSON file")
    p.add_argument("--out", required=True, help="oracle JSON output path")
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_oracle)


def _add_compare(sub):
    p = sub.add_parser("compare", help="compare a run CSV against an oracle file")
    p.add_argument("--run", required=True, help="run output prefix (as passed to solve)")
    p.add_argument("--oracle", required=True, help="oracle JSON file")
    p.add_argument("--out", help="optional comparison JSON output path")
    p.set_defaults(func=cmd_compare)


def _add_check_poly(sub):
    p = sub.add_parser("check-poly", help="monotone weight polynomial diagnostics")
    p.add_argument("--sigma", required=True,
                   help="factor matrix as JSON rows, e.g. '[[2],[2]]'")
    p.add_argument("--k", type=int, default=None,
                   help="smoothing order (default: smallest monotone order)")
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--drift-gap", default=None,
                   help="drift gap vector as JSON, default zero")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_poly)


def _add_check_fd(sub):
    p = sub.add_parser("check-fd", help="finite-difference stencil equivalences")
    p.add_argument("--a11", type=float, default=None, help="1D diffusion coefficient")
    p.add_argument("--A", default=None, help="2x2 matrix as JSON rows for the 9-point stencil")
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--nu", type=float, default=None,
                   help="increment magnitude, default sqrt(4k+3)")
    p.set_defaults(func=cmd_check_fd)


def cmd_solve(args):
    config = benchmarks.ExperimentConfig.from_json(args.config)
    _, _, summary = benchmarks.run_experiment(config, args.out)
    print(f"solve: wrote {args.out}.csv, {args.out}_summary.json, {args.out}_value.json")
    print(f"k={summary['k_used']} abar={summary['abar']:.6g} "
          f"negative_weights={summary['negative_weight_count']} "
          f"stability_violations={summary['stability_violation_count']}")
    return EXIT_OK


def cmd_oracle(args):
    config = benchmarks.ExperimentConfig.from_json(args.config)
    benchmarks.write_oracle_file(config, args.out, tol=args.tol)
    print(f"oracle: wrote {args.out}")
    return EXIT_OK


def cmd_compare(args):
    with open(args.oracle) as fh:
        oracle = json.load(fh)
    run_csv = args.run if args.run.endswith(".csv") else f"{args.run}.csv"
    rows = []
    with open(run_csv) as fh:
        for rec in csv.DictReader(fh):
            rows.append((float(rec["t"]), float(rec["x_sweep"]),
                         float(rec["value"]), float(rec["stderr_proxy"])))
    run_by_key = {(t, s): (v, se) for t, s, v, se in rows}
    gaps, proxies = [], []
    for sl in oracle["slices"]:
        for s, v_oracle in zip(sl["x_sweep"], sl["value"]):
            key = (float(sl["t"]), float(s))
            if key not in run_by_key:
                raise ConfigurationError(
                    f"run CSV has no row for t={key[0]}, x_sweep={key[1]}")
            v_run, se = run_by_key[key]
            gaps.append(abs(v_run - v_oracle))
            proxies.append(se)
    max_gap = max(gaps)
    threshold = max(0.3, 4.0 * max(proxies))
    result = {
        "max_gap": max_gap,
        "mean_gap": float(np.mean(gaps)),
        "threshold": threshold,
        "max_stderr_proxy": max(proxies),
        "pass": bool(max_gap <= threshold),
    }
    print(json.dumps(result, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=1)
    return EXIT_OK if result["pass"] else EXIT_NUMERICAL


def cmd_check_poly(args):
    Sigma = np.atleast_2d(np.asarray(json.loads(args.sigma), dtype=float))
    abar = float(np.sum(Sigma * Sigma))
    k = args.k if args.k is not None else monotone_poly.min_k_for_monotonicity(abar)
    poly = monotone_poly.build(Sigma, k)
    d = poly.dim
    gap = (np.zeros(d) if args.drift_gap is None
           else np.asarray(json.loads(args.drift_gap), dtype=float))
    rng = np.random.default_rng(args.seed)
    w = rng.standard_normal((args.samples, d))
    mean_p = float(np.mean(monotone_poly.eval_P(poly, w)))
    weights = monotone_poly.one_step_weight(poly, gap, np.eye(d), args.delta,
                                            args.h, w)
    min_w = float(np.min(weights))
    print(f"c_k = {poly.c_k!r}")
    print(f"K = {poly.K!r}")
    print(f"tr(Sigma Sigma') = {abar!r}, k = {k}")
    print(f"sampled mean of P ({args.samples} draws) = {mean_p!r}")
    print(f"minimum sampled one-step weight = {min_w!r}")
    return EXIT_OK if min_w >= 0.0 else EXIT_NUMERICAL


def cmd_check_fd(args):
    if args.a11 is None and args.A is None:
        raise UsageError("check-fd needs --a11 (1D) and/or --A (2D)")
    code = EXIT_OK
    if args.a11 is not None:
        nu = args.nu if args.nu is not None else float(np.sqrt(4 * args.k + 3))
        st = scheme_ops.discrete_increment_operator_1d(args.a11, args.k, nu)
        print(f"1D stencil (A11={args.a11}, k={args.k}, nu={nu}):")
        print(f"  b = {st['b']!r}")
        print(f"  weights: center={st['w_center']!r} side={st['w_plus']!r}")
        print(f"  consistent={st['consistent']} monotone={st['monotone']}")
        if not st["monotone"]:
            code = EXIT_NUMERICAL
    if args.A is not None:
        A = np.asarray(json.loads(args.A), dtype=float)
        w_center, w_axis, w_corner = scheme_ops.discrete_increment_weights_2d(A)
        total = w_center + 2 * w_axis.sum() + sum(w_corner.values())
        print(f"2D 9-point stencil (k=0, nu=sqrt(3)):")
        print(f"  center={w_center!r}")
        print(f"  axis={w_axis.tolist()!r} (each of +-e_i)")
        for key, val in sorted(w_corner.items()):
            print(f"  corner{key}={val!r}")
        print(f"  sum={total!r}")
        monotone = w_center >= 0 and np.all(w_axis >= 0) and min(w_corner.values()) >= 0
        print(f"  monotone={bool(monotone)}")
        if not monotone:
            code = EXIT_NUMERICAL
    return code


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="maxplus-hjb",
        description="max-plus probabilistic solver benchmarks and diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_solve(sub)
    _add_oracle(sub)
    _add_compare(sub)
    _add_check_poly(sub)
    _add_check_fd(sub)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
