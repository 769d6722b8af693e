"""Training of implicit networks with a measure-bounded weight parametrisation.

``A`` is never optimised directly: the free matrix ``T`` is mapped to
``A = T - diag(|T| 1) + gamma I`` so that ``mu_inf(A) <= gamma`` holds after
every step. Gradients through the fixed point come from the adjoint equation
solved with the same averaged iteration as the forward pass.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .fixedpoint import IterationConfig, IterationTrace, average_iteration
from .measures import parametrize_bounded_measure
from .network import (
    Activation,
    ConvergenceError,
    ImplicitNetwork,
    b_norm,
    c_norm,
    d_norm,
    default_alpha,
    forward_batch,
    lipschitz_bounds,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def softmax_crossentropy(logits, label: int):
    """Cross-entropy of one logit vector; returns ``(loss, dloss/dlogits)``."""
    z = np.asarray(logits, dtype=float).ravel()
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
    zmax = z.max()
    lse = zmax + np.log(np.sum(np.exp(z - zmax)))
    grad = np.exp(z - lse)
    grad[label] -= 1.0
    return float(lse - z[label]), grad


def softmax_crossentropy_batch(Y, labels):
    """Per-column cross-entropy. Returns ``(losses (m,), grads (q, m))``."""
    Y = np.asarray(Y, dtype=float)
    labels = np.asarray(labels)
    zmax = Y.max(axis=0)
    lse = zmax + np.log(np.sum(np.exp(Y - zmax), axis=0))
    idx = np.arange(Y.shape[1])
    G = np.exp(Y - lse)
    G[labels, idx] -= 1.0
    return lse - Y[labels, idx], G


@dataclass
class GradientSet:
    """Loss gradients; blocks that do not apply are ``None``."""

    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    T: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    trace: Optional[IterationTrace] = field(default=None, repr=False)

    def blocks(self) -> dict:
        return {
            k: getattr(self, k)
            for k in ("T", "A", "B", "C", "D", "b", "u")
            if getattr(self, k) is not None
        }


def grad_T_from_grad_A(gA, T):
    """Chain rule through ``A = T - diag(|T| 1) + gamma I`` (``sign(0) = 0``)."""
    gA = np.asarray(gA, dtype=float)
    T = np.asarray(T, dtype=float)
    d = np.diag(gA)
    gT = gA - np.sign(T) * d[:, None]
    np.fill_diagonal(gT, d * (1.0 - np.sign(np.diag(T))))
    return gT


def _l1_column_norm(eta):
    eta = np.asarray(eta, dtype=float)

    def measure(V):
        if V.ndim == 1:
            return float(np.sum(eta * np.abs(V)))
        return float(np.max(eta @ np.abs(V)))

    return measure


def implicit_backward(
    net: ImplicitNetwork,
    U,
    X,
    grad_Y,
    cfg: Optional[IterationConfig] = None,
    T=None,
) -> GradientSet:
    """Gradients of a loss through the fixed point ``X``.

    ``U``, ``X`` and ``grad_Y`` are single vectors or column batches; batch
    gradients are summed over columns. With ``J = phi'(AX + BU)`` the adjoint
    ``v = J (A^T v + C^T grad_y)`` is obtained from ``p = A^T J p + C^T grad_y``,
    ``v = J p``. The map on ``p`` contracts in the weighted l1 norm with the
    same step and factor as the forward iteration, so it is solved with the
    averaged iteration and its residuals are reported in that norm.
    Passing ``T`` adds the chain-rule gradient for the free parameter.
    """
    U = np.asarray(U, dtype=float)
    X = np.asarray(X, dtype=float)
    G = np.asarray(grad_Y, dtype=float)
    if cfg is None:
        cfg = IterationConfig(alpha=default_alpha(net))
    J = net.activation.derivative(net.A @ X + net.B @ U)
    W = net.C.T @ G
    At = net.A.T
    step_cfg = IterationConfig(alpha=cfg.alpha, tol=cfg.alpha * cfg.tol, max_iter=cfg.max_iter)
    trace = average_iteration(lambda P: At @ (J * P) + W, np.zeros_like(W), step_cfg, _l1_column_norm(net.eta))
    if not trace.converged:
        what = "diverged" if trace.diverged else "did not converge"
        raise ConvergenceError(f"adjoint iteration {what} after {trace.iterations} steps", trace)
    V = J * trace.iterate
    outer = np.outer if V.ndim == 1 else (lambda a, b: a @ b.T)
    grads = GradientSet(
        A=outer(V, X),
        B=outer(V, U),
        C=outer(G, X),
        u=net.B.T @ V + (0.0 if net.bias_only else net.D.T @ G),
        trace=trace,
    )
    if net.bias_only:
        grads.b = G if G.ndim == 1 else G.sum(axis=1)
    else:
        grads.D = outer(G, U)
    if T is not None:
        grads.T = grad_T_from_grad_A(grads.A, T)
    return grads


def adjoint_matrix(net: ImplicitNetwork, X, U, cfg: Optional[IterationConfig] = None) -> np.ndarray:
    """Solve ``G = J (A G + I)`` column by column for one sample (small n only).

    ``G = (I - JA)^{-1} J`` and the backward vector equals ``G^T C^T grad_y``;
    used to cross-check :func:`implicit_backward`.
    """
    if cfg is None:
        cfg = IterationConfig(alpha=default_alpha(net), tol=1e-13, max_iter=100_000)
    J = net.activation.derivative(net.A @ np.asarray(X) + net.B @ np.asarray(U))
    n = net.n
    eta = net.eta

    def measure(M):
        return float(np.max(np.abs(M) / eta[:, None]))

    trace = average_iteration(lambda M: J[:, None] * (net.A @ M + np.eye(n)), np.zeros((n, n)), cfg, measure)
    if not trace.converged:
        raise ConvergenceError("matrix adjoint iteration did not converge", trace)
    return trace.iterate


# -- trainable parameters and regulariser -----------------------------------


@dataclass(eq=False)
class TrainableParams:
    T: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: Optional[np.ndarray]
    gamma: float
    activation: Activation = field(default_factory=Activation.relu)
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.gamma < 1:
            raise ValueError("gamma must be < 1")

    @property
    def bias_only(self) -> bool:
        return self.b is not None

    @property
    def A(self) -> np.ndarray:
        return parametrize_bounded_measure(self.T, self.gamma)

    def realize(self) -> ImplicitNetwork:
        if self.bias_only:
            return ImplicitNetwork(self.A, self.B, self.C, eta=None, activation=self.activation, b=self.b)
        return ImplicitNetwork(self.A, self.B, self.C, self.D, activation=self.activation)

    def arrays(self) -> dict:
        out = {"T": self.T, "B": self.B, "C": self.C}
        if self.bias_only:
            out["b"] = self.b
        else:
            out["D"] = self.D
        return out

    def with_arrays(self, arrays: dict) -> "TrainableParams":
        return replace(self, **arrays)

    def copy(self) -> "TrainableParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})


def init_params(
    n: int,
    r: int,
    q: int,
    gamma: float,
    rng: np.random.Generator,
    activation: Activation | None = None,
    bias_only: bool = False,
    t_scale: float = 1.0,
) -> TrainableParams:
    """Uniform fan-in initialisation; ``T`` entries lie in ``+-t_scale/n``."""
    act = activation or Activation.relu()
    T = rng.uniform(-t_scale / n, t_scale / n, (n, n))
    B = rng.uniform(-1, 1, (n, r)) / np.sqrt(r)
    C = rng.uniform(-1, 1, (q, n)) / np.sqrt(n)
    if bias_only:
        return TrainableParams(T, B, C, None, gamma, act, b=np.zeros(q))
    D = rng.uniform(-1, 1, (q, r)) / np.sqrt(r)
    return TrainableParams(T, B, C, D, gamma, act)


def _row_sign_subgradient(M):
    """Subgradient of the max absolute row sum (first maximising row)."""
    g = np.zeros_like(M)
    i = int(np.argmax(np.abs(M).sum(axis=1)))
    g[i] = np.sign(M[i])
    return g


def _measure_subgradient(A):
    """Subgradient of ``mu_inf(A)`` (eta = 1) on the first maximising row."""
    off = np.abs(A).sum(axis=1) - np.abs(np.diag(A))
    i = int(np.argmax(np.diag(A) + off))
    g = np.zeros_like(A)
    g[i] = np.sign(A[i])
    g[i, i] = 1.0
    return g, float(np.diag(A)[i] + off[i])


def regularizer(params: TrainableParams, lam: float):
    """Lipschitz penalty ``lam * ((||B||^2 + ||C||^2) / 2 / (1 - mu_+) + ||D||)``.

    Returns ``(value, GradientSet)`` with gradients for ``T, B, C`` and ``D``
    (``b`` gets zeros in bias-only mode, which drops the ``||D||`` term).
    """
    A = params.A
    eta = np.ones(A.shape[0])
    g_mu, mu = _measure_subgradient(A)
    mu_plus = max(mu, 0.0)
    den = 1.0 - mu_plus
    nb, nc = b_norm(params.B, eta), c_norm(params.C, eta)
    nd = 0.0 if params.bias_only else d_norm(params.D)
    num = 0.5 * (nb**2 + nc**2)
    value = lam * (num / den + nd)
    grads = GradientSet(
        B=lam * nb / den * _row_sign_subgradient(params.B),
        C=lam * nc / den * _row_sign_subgradient(params.C),
    )
    # zero subgradient through the clamp at mu = 0
    gA = lam * num / den**2 * g_mu if mu > 0 else np.zeros_like(A)
    grads.A = gA
    grads.T = grad_T_from_grad_A(gA, params.T)
    if params.bias_only:
        grads.b = np.zeros_like(params.b)
    else:
        grads.D = lam * _row_sign_subgradient(params.D)
    return float(value), grads


def finite_difference_oracle(loss_fn: Callable[[dict], float], params: dict, delta: float = 1e-5) -> dict:
    """Central differences of ``loss_fn`` for every entry of every array in ``params``."""
    base = {k: np.array(v, dtype=float) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + delta
            f_plus = loss_fn(base)
            arr[idx] = orig - delta
            f_minus = loss_fn(base)
            arr[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * delta)
        out[name] = g
    return out


# -- optimisers ---------------------------------------------------------------


class OptimizerKind(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays: dict, grads: dict) -> dict:
        return {k: v - self.lr * grads[k] for k, v in arrays.items()}


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, arrays: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, x in arrays.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(x))
            v = self.v.get(k, np.zeros_like(x))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[k] = x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    lam: float = 0.0
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    tol: float = 1e-6
    max_iter: int = 500

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    def make_optimizer(self):
        if self.optimizer is OptimizerKind.SGD:
            return SGD(self.learning_rate)
        return Adam(self.learning_rate)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float
    lip_u_to_y_upper: float
    forward_iters_mean: float
    backward_iters_mean: float
    convex_upper: float = float("nan")


METRIC_COLUMNS = (
    "epoch",
    "train_loss",
    "val_accuracy",
    "lip_u_to_y_upper",
    "forward_iters_mean",
    "backward_iters_mean",
)


def metrics_to_csv(history) -> str:
    """Serialise epoch metrics; floats use ``repr`` so a parse/emit round trip is exact."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in history:
        w.writerow([m.epoch] + [repr(float(getattr(m, c))) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def metrics_from_csv(text: str) -> list[EpochMetrics]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise ValueError(f"expected header {','.join(METRIC_COLUMNS)}")
    return [EpochMetrics(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]


def predict(net: ImplicitNetwork, U, cfg: Optional[IterationConfig] = None, batch: int = 1000):
    """Class predictions for the columns of ``U``."""
    U = np.asarray(U, dtype=float)
    preds = []
    for start in range(0, U.shape[1], batch):
        _, Y, _ = forward_batch(net, U[:, start : start + batch], cfg)
        preds.append(np.argmax(Y, axis=0))
    return np.concatenate(preds)


def accuracy(net: ImplicitNetwork, data: Dataset, cfg: Optional[IterationConfig] = None) -> float:
    return float(np.mean(predict(net, data.inputs, cfg) == data.labels))


def batch_loss_and_grads(params: TrainableParams, U, labels, lam: float, iter_cfg: IterationConfig):
    """Mean cross-entropy plus penalty over one batch and its gradients.

    Returns ``(loss, grads dict, forward trace, backward trace)``.
    """
    net = params.realize()
    cfg = replace(iter_cfg, alpha=default_alpha(net))
    X, Y, ftrace = forward_batch(net, U, cfg)
    losses, G = softmax_crossentropy_batch(Y, labels)
    m = U.shape[1]
    g = implicit_backward(net, U, X, G, cfg, T=params.T)
    reg_value, rg = regularizer(params, lam)
    grads = {"T": g.T / m + rg.T, "B": g.B / m + rg.B, "C": g.C / m + rg.C}
    if params.bias_only:
        grads["b"] = g.b / m + rg.b
    else:
        grads["D"] = g.D / m + rg.D
    return float(np.mean(losses)) + reg_value, grads, ftrace, g.trace


def train(
    params: TrainableParams,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    callback: Optional[Callable[[int, TrainableParams], None]] = None,
):
    """Minibatch training. Returns ``(trained params, list of EpochMetrics)``.

    Batches are drawn from a permutation seeded by ``cfg.seed``; identical
    inputs give bit-identical results. ``callback(step, params)`` runs after
    every optimiser step.
    """
    if train_set.dim != params.B.shape[1] or val_set.dim != params.B.shape[1]:
        raise ValueError("dataset dimension does not match the input matrix B")
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.make_optimizer()
    iter_cfg = IterationConfig(alpha=1.0, tol=cfg.tol, max_iter=cfg.max_iter)
    params = params.copy()
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_set.size)
        losses, f_iters, b_iters = [], [], []
        for start in range(0, train_set.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            U = train_set.inputs[:, idx]
            try:
                loss, grads, ft, bt = batch_loss_and_grads(params, U, train_set.labels[idx], cfg.lam, iter_cfg)
            except ConvergenceError as exc:
                tr = exc.trace
                detail = f"; last residuals {tr.residuals[-3:]}" if tr is not None else ""
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}{detail}") from exc
            params = params.with_arrays(opt.step(params.arrays(), grads))
            step += 1
            losses.append(loss)
            f_iters.append(ft.iterations)
            b_iters.append(bt.iterations)
            if callback is not None:
                callback(step, params)
        net = params.realize()
        bounds = lipschitz_bounds(net)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_accuracy=accuracy(net, val_set, replace(iter_cfg, alpha=default_alpha(net))),
            lip_u_to_y_upper=bounds.lip_u_to_y,
            forward_iters_mean=float(np.mean(f_iters)),
            backward_iters_mean=float(np.mean(b_iters)),
            convex_upper=bounds.convex_upper,
        )
        log.info(
            "epoch %d loss %.4f val_acc %.4f lip %.4g fwd %.1f bwd %.1f",
            epoch,
            metrics.train_loss,
            metrics.val_accuracy,
            metrics.lip_u_to_y_upper,
            metrics.forward_iters_mean,
            metrics.backward_iters_mean,
        )
        history.append(metrics)
    return params, history
