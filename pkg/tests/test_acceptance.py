"""Acceptance gate: the twelve release criteria at their stated tolerances.

Each test prints one ``[PASS]``/``[FAIL]`` line (shown even under capture)
before asserting. Criteria 9-11 train on the bundled 5,000/1,000 MNIST subset.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_net
from nemon.cli import main as cli_main
from nemon.data import load_mnist
from nemon.fixedpoint import IterationConfig, average_iteration, gamma_contraction_factor, optimal_alpha_general, optimal_alpha_linf
from nemon.measures import (
    NormKind,
    NormSpec,
    lumer_bruteforce_inf,
    matrix_measure,
    matrix_norm,
    measure_limit_oracle,
    optimal_alpha_norm_min,
    parametrize_bounded_measure,
    recover_parametrization,
)
from nemon.network import (
    Activation,
    certified_radii,
    default_alpha,
    forward,
    forward_batch,
    lipschitz_bounds,
    network_constants,
)
from nemon.robustness import AttackKind, AttackSpec, apply_attack
from nemon.training import (
    OptimizerKind,
    TrainableParams,
    TrainConfig,
    accuracy,
    finite_difference_oracle,
    implicit_backward,
    init_params,
    softmax_crossentropy_batch,
    train,
)

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist"


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}")
        assert ok, detail

    return emit


def random_spec(rng, n, kind):
    if kind is NormKind.L2:
        M = rng.standard_normal((n, n))
        return NormSpec.l2(M @ M.T + n * np.eye(n))
    eta = rng.uniform(0.2, 3.0, n)
    return NormSpec.l1(eta) if kind is NormKind.L1 else NormSpec.linf(eta)


def test_c01_measure_oracle_agreement(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for k in range(200):
        n = (2, 5, 10)[k % 3]
        A = rng.standard_normal((n, n))
        for kind in NormKind:
            ns = random_spec(rng, n, kind)
            mu = matrix_measure(A, ns)
            worst = max(worst, abs(mu - measure_limit_oracle(A, ns, h=1e-8)) / (1 + abs(mu)))
    elapsed = time.perf_counter() - start
    report(1, "measure vs limit oracle", worst <= 1e-6 and elapsed < 5, f"max rel err {worst:.2e}, {elapsed:.2f} s")


def test_c02_parametrization(report):
    rng = np.random.default_rng(2)
    ones = lambda n: NormSpec.linf(np.ones(n))  # noqa: E731
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        T = rng.standard_normal((n, n)) * rng.uniform(0.01, 100)
        violations += matrix_measure(parametrize_bounded_measure(T, 0.95), ones(n)) > 0.95 + 1e-12
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 12))
        A = rng.standard_normal((n, n))
        A -= max(matrix_measure(A, ones(n)) - 0.95, 0.0) * np.eye(n)
        A -= rng.uniform(0, 1) * np.eye(n)
        back = parametrize_bounded_measure(recover_parametrization(A, 0.95), 0.95)
        worst = max(worst, float(np.max(np.abs(back - A))))
    report(2, "measure-bounded parametrisation", violations == 0 and worst <= 1e-12, f"{violations} violations, roundtrip err {worst:.1e}")


def test_c03_lumer_equality(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 7))
        A = rng.standard_normal((n, n))
        eta = rng.uniform(0.2, 3.0, n)
        worst = max(worst, abs(lumer_bruteforce_inf(A, eta) - matrix_measure(A, NormSpec.linf(eta))))
    report(3, "Lumer brute force vs row formula", worst <= 1e-9, f"max abs err {worst:.1e}")


def test_c04_norm_minimising_step(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 6))
        A = rng.standard_normal((n, n)) / n
        eta = rng.uniform(0.5, 2.0, n)
        ns = NormSpec.linf(eta)
        _, t = optimal_alpha_norm_min(A, eta)
        # 1e-6-step grid on the region where the minimiser can lie
        hi = max(2.0 / max(np.max(np.abs(np.diag(A))), 1e-3), 1.0)
        hi = min(hi, 4.0)
        grid = np.arange(0.0, hi, 1e-6)
        d = np.diag(A)
        r = (np.abs(A) * (eta[None, :] / eta[:, None])).sum(axis=1) - np.abs(d)
        vals = np.maximum(
            np.max(1 + grid[:, None] * (d + r)[None, :], axis=1),
            np.max(-1 + grid[:, None] * (r - d)[None, :], axis=1),
        )
        t_grid = float(np.min(vals))
        # the closed-form envelope agrees with the induced norm at the grid optimum
        a_grid = grid[int(np.argmin(vals))]
        assert matrix_norm(np.eye(n) + a_grid * A, ns) == pytest.approx(t_grid, abs=1e-12)
        worst = max(worst, abs(t - t_grid))
    report(4, "norm-minimising step vs grid search", worst <= 1e-6, f"max objective gap {worst:.1e}")


def test_c05_acceleration(report):
    A = np.array([[-3.0, 3.9], [3.9, -3.0]])
    b = np.array([1.0, -2.0])
    ns = NormSpec.linf(np.ones(2))
    mu, lip = matrix_measure(A, ns), matrix_norm(A, ns)
    picard = average_iteration(lambda x: A @ x + b, np.zeros(2), IterationConfig(1.0, 1e-8, 50), ns)
    r = picard.residuals
    picard_diverges = (not picard.converged) and max(r) >= 10 * r[0]
    alpha, _ = optimal_alpha_linf(mu, -3.0)
    avg = average_iteration(lambda x: A @ x + b, np.zeros(2), IterationConfig(alpha, 1e-8, 10000), ns)

    rng = np.random.default_rng(5)
    worst = -np.inf
    for _ in range(20):
        net = random_net(rng, n=10, gamma=float(rng.uniform(-0.5, 0.95)), t_scale=4.0)
        k = network_constants(net)
        a_star, factor = optimal_alpha_linf(k.osl, k.diagl)
        res = forward(net, rng.standard_normal(net.r), IterationConfig(a_star, 1e-12, 20000))
        rr = np.asarray(res.trace.residuals)
        rr = rr[rr > 1e-13]
        worst = max(worst, float(np.max(rr[1:] / rr[:-1] - factor)))
    ok = abs(mu - 0.9) < 1e-12 and lip >= 3 and picard_diverges and avg.converged and worst <= 1e-6
    report(
        5,
        "accelerated averaged iteration",
        ok,
        f"mu={mu:.2f} ||A||={lip:.1f}; Picard x{r[-1] / r[0]:.1e} in {len(r)} steps; "
        f"alpha*={alpha:.3f} converged in {avg.iterations}; worst ratio excess {worst:.1e}",
    )


def test_c06_general_step_optimum(report):
    alpha, factor = optimal_alpha_general(1.0, 0.5)
    c, s = 0.5, 2.0
    grid = np.arange(1e-7, c / ((c + s) * s), 1e-7)
    xi = 1 + grid * c - grid**2 * s**2 / (1 - grid * s)
    k = int(np.argmax(xi))
    a_grid, f_grid = grid[k], 1 / xi[k]
    kappa = 4.0
    series = 1 - 1 / (4 * kappa**2) + 1 / (8 * kappa**3)
    assert gamma_contraction_factor(alpha, 1.0, c) == factor
    ok = abs(alpha - a_grid) <= 1e-5 and abs(factor - f_grid) <= 1e-7 and abs(factor - series) <= 5e-4
    report(6, "optimal general step", ok, f"alpha*={alpha:.7f} (grid {a_grid:.7f}), factor={factor:.7f} (grid {f_grid:.7f}, series {series:.6f})")


def test_c07_gradient_correctness(report):
    start = time.perf_counter()
    worst = {}
    for seed in range(5):
        rng = np.random.default_rng(70 + seed)
        n, r, q = 8, 4, 3
        params = TrainableParams(
            T=rng.uniform(-1, 1, (n, n)),
            B=rng.standard_normal((n, r)),
            C=rng.standard_normal((q, n)),
            D=rng.standard_normal((q, r)),
            gamma=0.8,
            activation=Activation.smooth_relu(0.5),
        )
        U = rng.standard_normal((r, 2))
        labels = rng.integers(0, q, 2)
        net = params.realize()
        cfg = IterationConfig(default_alpha(net), 1e-13, 100000)

        def loss(p, U=U, labels=labels):
            net_p = params.with_arrays({k: v for k, v in p.items() if k != "U"}).realize()
            _, Y, _ = forward_batch(net_p, p.get("U", U), IterationConfig(default_alpha(net_p), 1e-13, 100000))
            return float(np.sum(softmax_crossentropy_batch(Y, labels)[0]))

        X, Y, _ = forward_batch(net, U, cfg)
        g = implicit_backward(net, U, X, softmax_crossentropy_batch(Y, labels)[1], cfg, T=params.T)
        fd = finite_difference_oracle(loss, {**params.arrays(), "U": U}, 1e-5)
        for name, mine in (("T", g.T), ("B", g.B), ("C", g.C), ("D", g.D), ("U", g.u)):
            err = np.max(np.abs(mine - fd[name])) / np.max(np.abs(fd[name]))
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(7, "implicit gradients vs finite differences", top <= 1e-5 and elapsed < 10, f"{detail}; {elapsed:.1f} s")


def test_c08_lipschitz_soundness(report):
    rng = np.random.default_rng(8)
    violations = 0
    for _ in range(10):
        net = random_net(rng, n=10, r=5, q=4, gamma=float(rng.uniform(-0.5, 0.95)))
        lb = lipschitz_bounds(net)
        cfg = IterationConfig(default_alpha(net), 1e-12, 50000)
        for _ in range(100):
            u = rng.standard_normal(5)
            v = u + rng.uniform(1e-3, 1.0) * rng.standard_normal(5)
            ru, rv = forward(net, u, cfg), forward(net, v, cfg)
            d = np.max(np.abs(u - v))
            violations += np.max(np.abs(ru.state - rv.state)) > lb.lip_u_to_x * d + 1e-10
            violations += np.max(np.abs(ru.output - rv.output)) > lb.lip_u_to_y * d + 1e-10
    report(8, "input-to-state/output Lipschitz bounds", violations == 0, f"{violations} violations over 1000 pairs")


@pytest.fixture(scope="module")
def mnist_runs():
    tr = load_mnist(MNIST / "train-images-idx3-ubyte.gz", MNIST / "train-labels-idx1-ubyte.gz", 5000, "train")
    te = load_mnist(MNIST / "t10k-images-idx3-ubyte.gz", MNIST / "t10k-labels-idx1-ubyte.gz", 1000, "test")
    runs = {}
    for lam in (0.0, 1e-5):
        cfg = TrainConfig(learning_rate=1.5e-2, batch_size=300, epochs=10, lam=lam, seed=0, optimizer=OptimizerKind.ADAM)
        start = time.perf_counter()
        params, hist = train(init_params(100, 784, 10, 0.95, np.random.default_rng(0)), tr, te, cfg)
        runs[lam] = (params.realize(), hist, time.perf_counter() - start)
    return tr, te, runs


def test_c09_certification_soundness(report, mnist_runs):
    _, te, runs = mnist_runs
    net = runs[0.0][0]
    data = te.subset(200)
    cfg = IterationConfig(default_alpha(net), 1e-10, 50000)
    radii, Y = certified_radii(net, data.inputs, data.labels, cfg)
    clean = np.argmax(Y, axis=0)
    eps = np.maximum(radii - 1e-9, 0.0)
    flips = {}
    for kind in AttackKind:
        adv = apply_attack(net, data.inputs, data.labels, AttackSpec(kind, seed=9), eps, cfg)
        assert np.all(np.abs(adv - data.inputs) <= eps[None, :] + 1e-15)
        flips[kind.value] = int(np.sum(np.argmax(forward_batch(net, adv, cfg)[1], axis=0) != clean))
    certified = int(np.sum(eps > 0))
    report(9, "certified radius soundness", sum(flips.values()) == 0, f"flips {flips}; {certified}/200 samples with positive radius")


def test_c10_mnist_accuracy(report, mnist_runs):
    _, te, runs = mnist_runs
    net, hist, elapsed = runs[0.0]
    acc = accuracy(net, te, IterationConfig(default_alpha(net), 1e-10, 50000))
    report(
        10,
        "desk-scale MNIST accuracy",
        acc >= 0.90 and elapsed < 600,
        f"test accuracy {acc:.4f} after 10 epochs in {elapsed:.0f} s "
        f"(fwd {np.mean([m.forward_iters_mean for m in hist]):.0f}, bwd {np.mean([m.backward_iters_mean for m in hist]):.0f} iterations)",
    )


def test_c11_regularization_direction(report, mnist_runs):
    _, te, runs = mnist_runs
    res = {}
    for lam, (net, _, _) in runs.items():
        res[lam] = (lipschitz_bounds(net).convex_upper, accuracy(net, te, IterationConfig(default_alpha(net), 1e-10, 50000)))
    ratio = res[0.0][0] / res[1e-5][0]
    drop = 100 * (res[0.0][1] - res[1e-5][1])
    report(
        11,
        "Lipschitz regularisation",
        ratio >= 10 and drop <= 5,
        f"convex bound {res[0.0][0]:.4g} -> {res[1e-5][0]:.4g} ({ratio:.2f}x smaller), accuracy drop {drop:.1f} points",
    )


def test_c12_cli_determinism(report, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(
        "seed=12\ndata.source=synth\ndata.train_count=150\ndata.test_count=50\nmodel.n=10\n"
        "train.batch_size=50\ntrain.epochs=2\nattack.count=30\nattack.epsilons=0.0,0.1\n"
        "attack.pgdm_steps=3\ncompare.n=8\ncompare.count=3\n"
    )
    commands = ["train", "certify", "attack", "compare-solvers", "run"]
    roots = [tmp_path / "first", tmp_path / "second"]
    for root in roots:
        for cmd in commands:
            assert cli_main([cmd, "--config", str(cfg), "--out", str(root)]) == 0
    a, b = (next(r.iterdir()) for r in roots)
    names = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".json"))
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = not differing and len(names) >= 5
    report(12, "byte-identical CLI artifacts", ok, f"{len(names)} CSV/JSON files compared, differing: {differing or 'none'}")
