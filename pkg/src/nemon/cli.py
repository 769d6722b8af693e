"""Command-line entry point: ``nemon <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import runner
from .config import ExperimentConfig, load_config
from .fixedpoint import optimal_alpha_general, optimal_alpha_linf
from .measures import NormSpec, matrix_measure, matrix_norm, perron_frobenius_eig


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return cfg.with_overrides(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _experiment(args)
    summary = runner.run(cfg)
    print(f"output: {cfg.output_dir()}")
    print(f"test_accuracy: {summary['test_accuracy']:.4f}")
    print(f"lip_u_to_y_upper: {summary['lip_u_to_y_upper']}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    train_set, test_set = runner.load_datasets(cfg)
    _, history = runner.train_stage(cfg, train_set, test_set)
    last = history[-1]
    print(f"output: {cfg.output_dir()}")
    print(f"val_accuracy: {last.val_accuracy:.4f}  lip_u_to_y_upper: {last.lip_u_to_y_upper:.6g}")
    return 0


def cmd_certify(args) -> int:
    cfg = _experiment(args)
    train_set, test_set = runner.load_datasets(cfg)
    net, _ = runner.trained_network(cfg, train_set, test_set)
    stats = runner.certify_stage(cfg, net, test_set)
    print(f"output: {cfg.output_dir()}")
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_attack(args) -> int:
    cfg = _experiment(args)
    train_set, test_set = runner.load_datasets(cfg)
    net, _ = runner.trained_network(cfg, train_set, test_set)
    curves = runner.attack_stage(cfg, net, test_set)
    print(f"output: {cfg.output_dir()}")
    for c in curves:
        pairs = " ".join(f"{e:g}:{a:.3f}/{ca:.3f}" for e, a, ca in zip(c.epsilons, c.empirical_accuracy, c.certified_accuracy))
        print(f"{c.attack_kind:14s} {pairs}")
    return 0


def _load_matrix(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, ndmin=2)


def cmd_measure(args) -> int:
    A = _load_matrix(Path(args.matrix))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        print("error: matrix must be square", file=sys.stderr)
        return 2
    n = A.shape[0]
    if args.norm == "l2":
        P = _load_matrix(Path(args.weights)) if args.weights else np.eye(n)
        ns = NormSpec.l2(P)
    else:
        eta = _load_matrix(Path(args.weights)).ravel() if args.weights else np.ones(n)
        ns = NormSpec.l1(eta) if args.norm == "l1" else NormSpec.linf(eta)
    mu = matrix_measure(A, ns)
    lip = matrix_norm(A, ns)
    print(f"measure: {mu!r}")
    print(f"norm: {lip!r}")
    print(f"pf_eig_abs: {perron_frobenius_eig(np.abs(A))!r}")
    if mu < 1:
        # the map x -> A x has osl mu and Lipschitz constant lip
        print(f"alpha_general: {optimal_alpha_general(lip, mu)[0]!r}")
        if args.norm == "linf":
            diagl = min(float(np.min(np.diag(A))), 0.0)
            alpha, factor = optimal_alpha_linf(mu, diagl)
            print(f"alpha_linf: {alpha!r}")
            print(f"contraction_factor: {factor!r}")
    return 0


def cmd_compare(args) -> int:
    cfg = _experiment(args)
    rows = runner.compare_solvers(cfg)
    print(f"output: {cfg.output_dir()}")
    print(f"{'k':>3} {'mu_inf':>8} {'||A||inf':>9} {'pf(|A|)':>8} {'alpha*':>8} {'picard':>16} {'averaged':>10}")
    for r in rows:
        picard = f"{r['picard_iters']} {r['picard_status']}" if r["picard_status"] != "converged" else str(r["picard_iters"])
        print(
            f"{r['instance']:>3} {r['mu_inf']:8.4f} {r['inf_norm']:9.4f} {r['pf_eig_abs']:8.4f} "
            f"{r['alpha_star']:8.4f} {picard:>16} {r['averaged_iters']:>10}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nemon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value experiment file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output root directory")

    for name, func, text in (
        ("run", cmd_run, "train, certify and attack; write all artifacts"),
        ("train", cmd_train, "train and write metrics and checkpoint"),
        ("certify", cmd_certify, "certified radii on the evaluation subset"),
        ("attack", cmd_attack, "robustness curves for the configured attacks"),
        ("compare-solvers", cmd_compare, "Picard versus averaged iteration counts"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.set_defaults(func=func)

    p = sub.add_parser("measure", parents=[common], help="measure and norm of a matrix file")
    p.add_argument("matrix", help=".npy or whitespace-separated text matrix")
    p.add_argument("--norm", choices=("linf", "l1", "l2"), default="linf")
    p.add_argument("--weights", help="eta vector (l1/linf) or P matrix (l2)")
    p.set_defaults(func=cmd_measure)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
