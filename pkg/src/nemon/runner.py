"""End-to-end experiment runner: train, certify, attack, report.

Every artifact lands in ``<output.dir>/<config hash>/``:

* ``config.txt``         canonical configuration
* ``metrics.csv``        per-epoch training metrics
* ``model.nemon``        trained network (binary container), ``T.npy`` raw free parameter
* ``certified.csv``      certified radius per evaluated test sample
* ``curves.csv``         empirical and certified accuracy per attack and epsilon
* ``summary.json``       headline numbers
* ``compare_solvers.csv`` Picard versus averaged iteration counts

Nothing time-dependent is written, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import network
from .config import ExperimentConfig
from .data import Dataset, SynthSpec, load_mnist, synth_dataset
from .fixedpoint import IterationConfig, average_iteration
from .measures import NormSpec, matrix_measure, matrix_norm, perron_frobenius_eig
from .network import Activation, ImplicitNetwork, certified_radii, default_alpha, lipschitz_bounds
from .robustness import AttackSpec, robustness_curve, write_curves_csv
from .training import TrainableParams, init_params, metrics_from_csv, metrics_to_csv, train

log = logging.getLogger(__name__)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data_source == "mnist":
        train_set = load_mnist(
            cfg.resolve(cfg.train_images), cfg.resolve(cfg.train_labels), cfg.train_count, "train"
        )
        test_set = load_mnist(
            cfg.resolve(cfg.test_images), cfg.resolve(cfg.test_labels), cfg.test_count, "test"
        )
        return train_set, test_set
    spec = SynthSpec(cfg.synth_classes, cfg.synth_dim, cfg.train_count, cfg.synth_margin, cfg.synth_sigma)
    train_set = synth_dataset(spec, cfg.seed, "train")
    test_set = synth_dataset(
        SynthSpec(spec.classes, spec.dim, cfg.test_count, spec.margin, spec.sigma), cfg.seed, "test"
    )
    return train_set, test_set


def initial_params(cfg: ExperimentConfig, dim: int, classes: int) -> TrainableParams:
    return init_params(
        cfg.n,
        dim,
        classes,
        cfg.gamma,
        np.random.default_rng(cfg.seed),
        activation=Activation.parse(cfg.activation),
        bias_only=cfg.bias_only,
        t_scale=cfg.t_scale,
    )


def eval_config(cfg: ExperimentConfig, net: ImplicitNetwork) -> IterationConfig:
    return IterationConfig(alpha=default_alpha(net), tol=cfg.eval_tol, max_iter=cfg.eval_max_iter)


def _out(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.canonical(), encoding="utf-8")
    return out


def train_stage(cfg: ExperimentConfig, train_set: Dataset, test_set: Dataset):
    """Train from scratch and write metrics and checkpoint. Returns ``(net, history)``."""
    out = _out(cfg)
    params = initial_params(cfg, train_set.dim, train_set.num_classes)
    params, history = train(params, train_set, test_set, cfg.train_config())
    net = params.realize()
    (out / "metrics.csv").write_text(metrics_to_csv(history), encoding="utf-8")
    network.save(net, out / "model.nemon")
    np.save(out / "T.npy", params.T)
    return net, history


def trained_network(cfg: ExperimentConfig, train_set: Dataset, test_set: Dataset):
    """Reuse the checkpoint of an earlier run of the same config, else train."""
    out = cfg.output_dir()
    if (out / "model.nemon").exists() and (out / "metrics.csv").exists():
        log.info("reusing checkpoint in %s", out)
        history = metrics_from_csv((out / "metrics.csv").read_text(encoding="utf-8"))
        return network.load(out / "model.nemon"), history
    return train_stage(cfg, train_set, test_set)


def _eval_subset(cfg: ExperimentConfig, test_set: Dataset) -> Dataset:
    return test_set.subset(min(cfg.attack_count, test_set.size))


def certify_stage(cfg: ExperimentConfig, net: ImplicitNetwork, test_set: Dataset) -> dict:
    """Certified radii on the evaluation subset, written to ``certified.csv``."""
    data = _eval_subset(cfg, test_set)
    radii, Y = certified_radii(net, data.inputs, data.labels, eval_config(cfg, net))
    pred = np.argmax(Y, axis=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("index", "label", "prediction", "certified_radius"))
    for i, (lab, p, r) in enumerate(zip(data.labels, pred, radii)):
        w.writerow((i, int(lab), int(p), repr(float(r))))
    (_out(cfg) / "certified.csv").write_text(buf.getvalue(), encoding="utf-8")
    ok = pred == data.labels
    return {
        "samples": int(data.size),
        "clean_accuracy": float(np.mean(ok)),
        "median_radius_correct": float(np.median(radii[ok])) if ok.any() else 0.0,
    }


def attack_stage(cfg: ExperimentConfig, net: ImplicitNetwork, test_set: Dataset):
    data = _eval_subset(cfg, test_set)
    ecfg = eval_config(cfg, net)
    curves = []
    for kind in cfg.attack_kinds:
        spec = AttackSpec(kind, seed=cfg.attack_seed, max_steps=cfg.pgdm_steps)
        curves.append(robustness_curve(net, data, spec, cfg.epsilons, ecfg))
        log.info("attack %s: %s", kind.value, curves[-1].empirical_accuracy)
    write_curves_csv(_out(cfg) / "curves.csv", curves)
    return curves


def _finite(x: float):
    return x if math.isfinite(x) else str(x)


def run(cfg: ExperimentConfig) -> dict:
    """Train, certify and attack; returns the summary written to ``summary.json``."""
    train_set, test_set = load_datasets(cfg)
    net, history = train_stage(cfg, train_set, test_set)
    ecfg = eval_config(cfg, net)
    pred = np.concatenate(
        [
            np.argmax(network.forward_batch(net, test_set.inputs[:, s : s + 1000], ecfg)[1], axis=0)
            for s in range(0, test_set.size, 1000)
        ]
    )
    cert = certify_stage(cfg, net, test_set)
    curves = attack_stage(cfg, net, test_set)
    bounds = lipschitz_bounds(net)
    wp = network.wellposedness(net, cfg.gamma)
    summary = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "test_accuracy": float(np.mean(pred == test_set.labels)),
        "final_val_accuracy": history[-1].val_accuracy,
        "final_train_loss": history[-1].train_loss,
        "lip_u_to_x_upper": _finite(bounds.lip_u_to_x),
        "lip_u_to_y_upper": _finite(bounds.lip_u_to_y),
        "lip_convex_upper": _finite(bounds.convex_upper),
        "mu_inf": wp.mu_inf,
        "inf_norm": wp.inf_norm,
        "pf_eig_abs": wp.pf_eig,
        "forward_iters_mean": float(np.mean([m.forward_iters_mean for m in history])),
        "backward_iters_mean": float(np.mean([m.backward_iters_mean for m in history])),
        "certification": cert,
        "attacks": {
            c.attack_kind: {
                "epsilons": c.epsilons.tolist(),
                "empirical_accuracy": c.empirical_accuracy.tolist(),
                "certified_accuracy": c.certified_accuracy.tolist(),
            }
            for c in curves
        },
    }
    out = _out(cfg)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def random_wellposed_matrix(n: int, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Random ``A`` with every row measure equal to ``mu`` and a negative diagonal.

    Off-diagonal row sums are drawn large, so ``||A||_inf`` typically exceeds 1
    and plain Picard iteration has no guarantee.
    """
    scale = rng.uniform(0.5, 3.0)
    A = rng.standard_normal((n, n)) * scale / np.sqrt(n)
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, mu - np.abs(A).sum(axis=1))
    return A


def compare_solvers(cfg: ExperimentConfig) -> list[dict]:
    """Picard versus optimally averaged iteration on seeded ReLU networks."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.compare_n
    rows = []
    for k in range(cfg.compare_count):
        A = random_wellposed_matrix(n, cfg.compare_mu, rng)
        B = rng.standard_normal((n, 4))
        net = ImplicitNetwork(A, B, np.zeros((1, n)))
        u = rng.standard_normal(4)
        drive = B @ u
        ns = NormSpec.linf(np.ones(n))
        alpha = default_alpha(net)
        row = {
            "instance": k,
            "mu_inf": matrix_measure(A, ns),
            "inf_norm": matrix_norm(A, ns),
            "pf_eig_abs": perron_frobenius_eig(np.abs(A)),
            "alpha_star": alpha,
        }
        for name, a in (("picard", 1.0), ("averaged", alpha)):
            trace = average_iteration(
                lambda x: net.activation(A @ x + drive),
                np.zeros(n),
                IterationConfig(alpha=a, tol=cfg.compare_tol, max_iter=2000),
                ns,
            )
            status = "converged" if trace.converged else ("diverged" if trace.diverged else "max_iter")
            row[f"{name}_iters"] = trace.iterations
            row[f"{name}_status"] = status
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    (_out(cfg) / "compare_solvers.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows
