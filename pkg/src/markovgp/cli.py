"""Command-line interface: run experiments, emit plot data, self-test."""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markovgp",
        description="Sequential inference and learning for Markovian GPs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a cross-validated experiment")
    run.add_argument("--config", help="JSON config file (overrides other flags)")
    run.add_argument("--dataset", help="dataset id or CSV path")
    run.add_argument("--rule", default="pep", choices=["pep", "eep", "slep", "cvi"])
    run.add_argument("--alpha", type=float, default=1.0)
    run.add_argument("--cubature", default="gh")
    run.add_argument("--folds", type=int, default=10)
    run.add_argument("--iters", type=int, default=250)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--step-size", type=float, default=0.1)
    run.add_argument(
        "--damping", type=float, default=None,
        help="site update damping (default: per-dataset)",
    )
    run.add_argument(
        "--shared-training", action="store_true",
        help="train hyperparameters once on the full series instead of per fold",
    )
    run.add_argument("--out", default="results")

    plot = sub.add_parser("plot", help="emit plot-ready CSVs from a record")
    plot.add_argument("--record", required=True, help="record JSON path")
    plot.add_argument("--out", default=None, help="output directory")

    sub.add_parser("selftest", help="run built-in oracle and equivalence checks")
    return parser


def _cmd_run(args) -> int:
    from .harness import ExperimentConfig, load_config, run_experiment

    if args.config:
        config = load_config(args.config)
    else:
        if not args.dataset:
            print("error: provide --config or --dataset", file=sys.stderr)
            return 2
        config = ExperimentConfig(
            dataset=args.dataset,
            rule=args.rule,
            alpha=args.alpha,
            cubature=args.cubature,
            damping=args.damping,
            folds=args.folds,
            iterations=args.iters,
            seed=args.seed,
            step_size=args.step_size,
            refit_per_fold=not args.shared_training,
            out_dir=args.out,
        )
    record = run_experiment(config)
    print(f"dataset={config.dataset} rule={config.rule} alpha={config.alpha}")
    print(f"NLPD {record.mean_nlpd:.4f} +- {record.std_nlpd:.4f} "
          f"({len(record.fold_nlpd)}/{config.folds} folds, "
          f"{record.wall_clock_seconds:.1f}s)")
    if record.fold_errors:
        print(f"fold errors: {record.fold_errors}", file=sys.stderr)
        return 1
    print(f"record written to {config.out_dir}/record_{record.config_hash}.json")
    return 0


def _cmd_plot(args) -> int:
    from .harness import ResultRecord, emit_plot_data

    path = pathlib.Path(args.record)
    record = ResultRecord.from_json(path.read_text())
    out = args.out if args.out else path.parent
    for written in emit_plot_data(record, out):
        print(f"wrote {written}")
    return 0


def _selftest() -> int:
    """Fast built-in checks: conjugate exactness, filter equivalence, sites."""
    from . import kernels as K
    from .cubature import make_rule
    from .engine import RuleConfig, TemporalGP, run_inference
    from .likelihoods import Gaussian, Poisson
    from .sites import Cavity, GaussianMoments, compute_cavity, pep_update

    failures = []
    total = 0

    def check(name, ok):
        nonlocal total
        total += 1
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)
    kern = K.Matern32(variance=1.0, lengthscale=1.0)
    t = np.sort(rng.uniform(0.0, 8.0, 80))
    gram = K.gram(kern, t) + 1e-10 * np.eye(80)
    f = np.linalg.cholesky(gram) @ rng.normal(size=80)
    noise = 0.25
    y = f + np.sqrt(noise) * rng.normal(size=80)

    # conjugate exactness of every update rule against dense regression
    kn = gram + noise * np.eye(80)
    dense_mean = gram @ np.linalg.solve(kn, y)
    model = TemporalGP((kern,), Gaussian(noise_variance=noise))
    for rule in ("pep", "eep", "slep", "cvi"):
        cfg = RuleConfig(rule, cubature="none" if rule == "eep" else "gh")
        res = run_inference(model, t, y, cfg, num_iters=3)
        got = np.array([m[0] for m in res.latent_means])
        check(
            f"{rule} matches dense conjugate regression",
            bool(np.max(np.abs(got - dense_mean)) < 1e-8),
        )

    # site update recovers the exact conjugate site
    cav = Cavity(np.array([0.4]), np.array([[1.7]]))
    site = pep_update(cav, 1.1, Gaussian(noise_variance=0.3), 0.7, None)
    check(
        "conjugate site is exact for fractional power",
        site is not None
        and abs(site.mu_site[0] - 1.1) < 1e-8
        and abs(site.sigma_site[0, 0] - 0.3) < 1e-8,
    )

    # cavity reinclusion round trip
    site2 = pep_update(cav, 2.0, Poisson(), 1.0, make_rule("gh", 1)) or site
    marg = GaussianMoments(np.array([0.2]), np.array([[0.9]]))
    cav2 = compute_cavity(marg, site2, 0.5)
    check("cavity computation succeeds on a fresh site", cav2 is not None)

    # nonconjugate smoothing runs and converges
    y_pois = rng.poisson(np.exp(f)).astype(float)
    res = run_inference(
        TemporalGP((kern,), Poisson()), t, y_pois, RuleConfig("pep"), num_iters=20
    )
    check("nonconjugate run converges", res.converged)
    check("energy is finite", bool(np.isfinite(res.energy.total)))

    print(f"{'OK' if not failures else 'FAILED'}: "
          f"{total - len(failures)}/{total} checks passed")
    return 0 if not failures else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "plot":
        return _cmd_plot(args)
    if args.command == "selftest":
        return _selftest()
    return 2


if __name__ == "__main__":
    sys.exit(main())
