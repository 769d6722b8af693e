"""Implicit network ``x = phi(A x + B u)``, ``y = C x + D u`` (or ``C x + b``).

All state-space quantities are measured in the weighted infinity norm
``||x|| = max_i |x_i| / eta_i``; inputs and outputs use the plain infinity
norm. The mixed induced norms used by the Lipschitz bounds are

* ``||B||`` from (R^r, inf) to (R^n, inf/eta):  ``max_i sum_j |b_ij| / eta_i``
* ``||C||`` from (R^n, inf/eta) to (R^q, inf):  ``max_k sum_i |c_ki| eta_i``
* ``||D||`` from (R^r, inf) to (R^q, inf):     ``max_k sum_j |d_kj|``
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fixedpoint import (
    ContractionConstants,
    IterationConfig,
    IterationTrace,
    average_iteration,
    optimal_alpha_linf,
)
from .measures import NormSpec, matrix_measure, matrix_norm, perron_frobenius_eig


class ActivationKind(enum.IntEnum):
    RELU = 0
    LEAKY_RELU = 1
    TANH = 2
    SMOOTH_RELU = 3


@dataclass(frozen=True)
class Activation:
    """Diagonal activation with slopes in [0, 1].

    ``param`` is the negative slope for leaky ReLU and the smoothing width
    ``delta`` for the smooth ReLU ``(x + sqrt(x^2 + delta^2)) / 2``.
    """

    kind: ActivationKind
    param: float = 0.0

    def __post_init__(self):
        if self.kind is ActivationKind.LEAKY_RELU and not 0.0 <= self.param <= 1.0:
            raise ValueError("leaky ReLU slope must lie in [0, 1]")
        if self.kind is ActivationKind.SMOOTH_RELU and not self.param > 0:
            raise ValueError("smooth ReLU delta must be positive")

    @classmethod
    def relu(cls):
        return cls(ActivationKind.RELU)

    @classmethod
    def leaky_relu(cls, slope=0.01):
        return cls(ActivationKind.LEAKY_RELU, float(slope))

    @classmethod
    def tanh(cls):
        return cls(ActivationKind.TANH)

    @classmethod
    def smooth_relu(cls, delta=0.1):
        return cls(ActivationKind.SMOOTH_RELU, float(delta))

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """Parse ``relu``, ``tanh``, ``leaky_relu[:slope]`` or ``smooth_relu[:delta]``."""
        name, _, arg = text.strip().lower().partition(":")
        if name == "relu":
            return cls.relu()
        if name == "tanh":
            return cls.tanh()
        if name == "leaky_relu":
            return cls.leaky_relu(float(arg) if arg else 0.01)
        if name == "smooth_relu":
            return cls.smooth_relu(float(arg) if arg else 0.1)
        raise ValueError(f"unknown activation {text!r}")

    def __str__(self):
        if self.kind in (ActivationKind.LEAKY_RELU, ActivationKind.SMOOTH_RELU):
            return f"{self.kind.name.lower()}:{self.param!r}"
        return self.kind.name.lower()

    def __call__(self, z):
        k = self.kind
        if k is ActivationKind.RELU:
            return np.maximum(z, 0.0)
        if k is ActivationKind.LEAKY_RELU:
            return np.where(z > 0, z, self.param * z)
        if k is ActivationKind.TANH:
            return np.tanh(z)
        return 0.5 * (z + np.sqrt(z * z + self.param**2))

    def derivative(self, z):
        """Slope at ``z``; the ReLU kink takes slope 0."""
        k = self.kind
        if k is ActivationKind.RELU:
            return (z > 0).astype(float)
        if k is ActivationKind.LEAKY_RELU:
            return np.where(z > 0, 1.0, self.param)
        if k is ActivationKind.TANH:
            return 1.0 - np.tanh(z) ** 2
        return 0.5 * (1.0 + z / np.sqrt(z * z + self.param**2))


class NotWellPosedError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, trace: Optional[IterationTrace] = None):
        super().__init__(msg)
        self.trace = trace


@dataclass(eq=False)
class ImplicitNetwork:
    """Weights of ``x = phi(Ax + Bu)``, ``y = Cx + Du``.

    With ``b`` set the output is ``y = Cx + b`` and ``D`` is ignored (it is
    kept as a zero matrix so shapes stay available).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None
    activation: Activation = field(default_factory=Activation.relu)
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float)
        self.B = np.array(self.B, dtype=float)
        self.C = np.array(self.C, dtype=float)
        n, r, q = self.A.shape[0], self.B.shape[1], self.C.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, r) or self.C.shape != (q, n):
            raise ValueError(
                f"inconsistent shapes A{self.A.shape} B{self.B.shape} C{self.C.shape}"
            )
        if self.b is not None:
            self.b = np.array(self.b, dtype=float).ravel()
            if self.b.shape != (q,):
                raise ValueError(f"b must have length {q}")
            self.D = np.zeros((q, r))
        elif self.D is None:
            self.D = np.zeros((q, r))
        self.D = np.array(self.D, dtype=float)
        if self.D.shape != (q, r):
            raise ValueError(f"D must have shape {(q, r)}, got {self.D.shape}")
        self.eta = np.ones(n) if self.eta is None else np.array(self.eta, dtype=float).ravel()
        if self.eta.shape != (n,) or np.any(self.eta <= 0):
            raise ValueError("eta must be a positive vector of length n")
        for name in ("A", "B", "C", "D", "eta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def r(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def bias_only(self) -> bool:
        return self.b is not None

    @property
    def norm(self) -> NormSpec:
        return NormSpec.linf(self.eta)

    def output(self, X, U):
        """Outputs for states ``X`` and inputs ``U`` (vectors or column batches)."""
        if self.bias_only:
            Y = self.C @ X
            return Y + (self.b if Y.ndim == 1 else self.b[:, None])
        return self.C @ X + self.D @ U


@dataclass
class ForwardResult:
    state: np.ndarray
    output: np.ndarray
    trace: IterationTrace


@dataclass(frozen=True)
class WellPosednessReport:
    mu_inf: float
    inf_norm: float
    pf_eig: float
    ok: bool


def b_norm(B, eta) -> float:
    return float(np.max(np.abs(B).sum(axis=1) / eta))


def c_norm(C, eta) -> float:
    return float(np.max(np.abs(C) @ eta))


def d_norm(D) -> float:
    return float(np.max(np.abs(D).sum(axis=1)))


def network_constants(net: ImplicitNetwork) -> ContractionConstants:
    ns = net.norm
    mu = matrix_measure(net.A, ns)
    return ContractionConstants(
        osl=max(mu, 0.0),
        lip=matrix_norm(net.A, ns),
        diagl=float(min(np.min(np.diag(net.A)), 0.0)),
        lip_u=b_norm(net.B, net.eta),
    )


def wellposedness(net: ImplicitNetwork, gamma: float = 1.0) -> WellPosednessReport:
    """Check ``mu(A) <= gamma`` and report the baseline diagnostics.

    ``inf_norm`` and ``pf_eig`` (Perron-Frobenius eigenvalue of ``|A|``) are
    the sufficient conditions used by earlier implicit models, for comparison.
    """
    ns = net.norm
    mu = matrix_measure(net.A, ns)
    return WellPosednessReport(
        mu_inf=mu,
        inf_norm=matrix_norm(net.A, ns),
        pf_eig=perron_frobenius_eig(np.abs(net.A), tol=1e-10),
        ok=bool(mu <= gamma),
    )


def default_alpha(net: ImplicitNetwork) -> float:
    """Largest admissible averaging step ``1 / (1 - min_i (a_ii)_-)``."""
    diagl = min(float(np.min(np.diag(net.A))), 0.0)
    return 1.0 / (1.0 - diagl)


def contraction_factor(net: ImplicitNetwork, alpha: Optional[float] = None) -> float:
    k = network_constants(net)
    if alpha is None:
        return optimal_alpha_linf(k.osl, k.diagl)[1]
    return 1.0 - alpha * (1.0 - k.osl)


def _column_norm(eta):
    eta = np.asarray(eta, dtype=float)

    def measure(V):
        if V.ndim == 1:
            return float(np.max(np.abs(V) / eta))
        return float(np.max(np.abs(V) / eta[:, None]))

    return measure


def forward_batch(
    net: ImplicitNetwork,
    U,
    cfg: Optional[IterationConfig] = None,
    *,
    raise_on_failure: bool = True,
):
    """Solve the fixed point for a single input or a column batch ``U`` (r x m).

    The iteration stops when every column's step is below ``alpha * tol`` so
    that the returned state satisfies ``||x - phi(Ax + Bu)|| <= tol``.
    Returns ``(X, Y, trace)``.
    """
    ns = net.norm
    mu = matrix_measure(net.A, ns)
    if not mu < 1:
        raise NotWellPosedError(f"mu_inf(A) = {mu} >= 1; fixed point not guaranteed")
    if cfg is None:
        cfg = IterationConfig(alpha=default_alpha(net))
    U = np.asarray(U, dtype=float)
    drive = net.B @ U
    A, phi = net.A, net.activation
    step_cfg = IterationConfig(alpha=cfg.alpha, tol=cfg.alpha * cfg.tol, max_iter=cfg.max_iter)
    trace = average_iteration(
        lambda X: phi(A @ X + drive), np.zeros_like(drive), step_cfg, _column_norm(net.eta)
    )
    if raise_on_failure and not trace.converged:
        what = "diverged" if trace.diverged else "did not converge"
        raise ConvergenceError(
            f"forward iteration {what} after {trace.iterations} steps "
            f"(last residual {trace.residuals[-1] if trace.residuals else float('nan'):.3e})",
            trace,
        )
    X = trace.iterate
    return X, net.output(X, U), trace


def forward(net: ImplicitNetwork, u, cfg: Optional[IterationConfig] = None) -> ForwardResult:
    u = np.asarray(u, dtype=float).ravel()
    X, Y, trace = forward_batch(net, u, cfg)
    return ForwardResult(state=X, output=Y, trace=trace)


def fixed_point_residual(net: ImplicitNetwork, x, u) -> float:
    x = np.asarray(x, dtype=float)
    r = x - net.activation(net.A @ x + net.B @ np.asarray(u, dtype=float))
    return _column_norm(net.eta)(r)


@dataclass(frozen=True)
class LipschitzBounds:
    lip_u_to_x: float
    lip_u_to_y: float
    convex_upper: float


def lipschitz_bounds(net: ImplicitNetwork) -> LipschitzBounds:
    """Input-to-state and input-to-output Lipschitz constants (infinity norms).

    ``convex_upper`` replaces the product ``||B|| ||C||`` with
    ``(||B||^2 + ||C||^2) / 2``.
    """
    mu_plus = max(matrix_measure(net.A, net.norm), 0.0)
    if mu_plus >= 1:
        raise NotWellPosedError(f"mu_inf(A) = {mu_plus} >= 1")
    nb, nc = b_norm(net.B, net.eta), c_norm(net.C, net.eta)
    nd = 0.0 if net.bias_only else d_norm(net.D)
    den = 1.0 - mu_plus
    return LipschitzBounds(
        lip_u_to_x=nb / den,
        lip_u_to_y=nb * nc / den + nd,
        convex_upper=0.5 * (nb**2 + nc**2) / den + nd,
    )


def margin(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=float)
    others = np.delete(logits, label)
    return float(logits[label] - np.max(others))


def radius_from_margin(margin_value: float, lip: float) -> float:
    """Certified l_inf radius ``margin / (2 lip)``; ``inf`` for a constant map."""
    if margin_value <= 0:
        return 0.0
    if lip == 0:
        return math.inf
    return margin_value / (2.0 * lip)


def certified_radius(
    net: ImplicitNetwork, u, true_label: int, cfg: Optional[IterationConfig] = None
) -> float:
    """Largest ``eps`` such that every ``||v - u||_inf <= eps`` keeps the class.

    Returns ``math.inf`` when the network output does not depend on the input.
    """
    res = forward(net, u, cfg)
    lip = lipschitz_bounds(net).lip_u_to_y
    return radius_from_margin(margin(res.output, true_label), lip)


def certified_radii(net: ImplicitNetwork, U, labels, cfg: Optional[IterationConfig] = None):
    """Vectorised :func:`certified_radius` over the columns of ``U``."""
    _, Y, _ = forward_batch(net, U, cfg)
    lip = lipschitz_bounds(net).lip_u_to_y
    labels = np.asarray(labels)
    idx = np.arange(Y.shape[1])
    true = Y[labels, idx]
    Y_other = Y.copy()
    Y_other[labels, idx] = -np.inf
    margins = true - Y_other.max(axis=0)
    return np.array([radius_from_margin(m, lip) for m in margins]), Y


# -- serialization -----------------------------------------------------------

MAGIC = b"NEMON1\0"
_HEADER = struct.Struct("<7sIIIBBd")


def dumps(net: ImplicitNetwork) -> bytes:
    """Binary container: magic, u32 n/r/q, activation tag, output mode, activation
    parameter (f64), then row-major little-endian f64 arrays A, B, C, D, eta, b."""
    mode = 1 if net.bias_only else 0
    head = _HEADER.pack(
        MAGIC, net.n, net.r, net.q, int(net.activation.kind), mode, net.activation.param
    )
    b = net.b if net.bias_only else np.zeros(net.q)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (net.A, net.B, net.C, net.D, net.eta, b)
    )
    return head + body


def loads(data: bytes) -> ImplicitNetwork:
    if len(data) < _HEADER.size:
        raise ValueError("truncated model file")
    magic, n, r, q, tag, mode, param = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    sizes = [n * n, n * r, q * n, q * r, n, q]
    expected = _HEADER.size + 8 * sum(sizes)
    if len(data) != expected:
        raise ValueError(f"model payload has {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    A, B, C, D, eta, b = (
        parts[0].reshape(n, n),
        parts[1].reshape(n, r),
        parts[2].reshape(q, n),
        parts[3].reshape(q, r),
        parts[4],
        parts[5],
    )
    act = Activation(ActivationKind(tag), param)
    if mode == 1:
        return ImplicitNetwork(A, B, C, eta=eta, activation=act, b=b)
    if mode != 0:
        raise ValueError(f"unknown output mode {mode}")
    return ImplicitNetwork(A, B, C, D, eta=eta, activation=act)


def save(net: ImplicitNetwork, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps(net))


def load(path) -> ImplicitNetwork:
    with open(path, "rb") as f:
        return loads(f.read())


def to_json(net: ImplicitNetwork) -> str:
    """Human-readable export carrying the same information as :func:`dumps`."""
    doc = {
        "format": "NEMON1",
        "n": net.n,
        "r": net.r,
        "q": net.q,
        "activation": str(net.activation),
        "output": "bias" if net.bias_only else "affine",
        "A": net.A.tolist(),
        "B": net.B.tolist(),
        "C": net.C.tolist(),
        "D": net.D.tolist(),
        "eta": net.eta.tolist(),
        "b": (net.b if net.bias_only else np.zeros(net.q)).tolist(),
    }
    return json.dumps(doc, indent=1)


def from_json(text: str) -> ImplicitNetwork:
    doc = json.loads(text)
    act = Activation.parse(doc["activation"])
    if doc["output"] == "bias":
        return ImplicitNetwork(doc["A"], doc["B"], doc["C"], eta=doc["eta"], activation=act, b=doc["b"])
    return ImplicitNetwork(doc["A"], doc["B"], doc["C"], doc["D"], eta=doc["eta"], activation=act)
