"""l_inf attacks and certified-versus-empirical robustness curves.

Attacked inputs are not clipped back to the image range; only the PGDM
perturbation itself is clipped to ``[-eps, eps]``. ``epsilon`` may be a scalar
or one value per column of the batch.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset
from .fixedpoint import IterationConfig
from .network import ImplicitNetwork, certified_radii, default_alpha, forward_batch
from .training import implicit_backward, softmax_crossentropy_batch


class AttackKind(enum.Enum):
    INVERSION = "inversion"
    UNIFORM_NOISE = "uniform_noise"
    FGSM = "fgsm"
    PGDM = "pgdm"


@dataclass(frozen=True)
class AttackSpec:
    """Attack parameters. ``step=None`` means ``epsilon / 4`` for PGDM."""

    kind: AttackKind
    epsilon: float = 0.0
    seed: int = 0
    step: Optional[float] = None
    max_steps: int = 20

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.step is not None and not self.step > 0:
            raise ValueError("PGDM step must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def _eps(epsilon, U):
    e = np.asarray(epsilon, dtype=float)
    if np.any(e < 0):
        raise ValueError("epsilon must be nonnegative")
    if e.ndim == 0:
        return e
    if U.ndim != 2 or e.shape != (U.shape[1],):
        raise ValueError("per-sample epsilon needs one value per column")
    return e[None, :]


def attack_inversion(U, epsilon):
    """Push every pixel towards the opposite end: ``U + eps sign(1/2 - U)``."""
    U = np.asarray(U, dtype=float)
    return U + _eps(epsilon, U) * np.sign(0.5 - U)


def attack_uniform_noise(U, epsilon, seed: int):
    """Add noise uniform in ``[-eps, eps]``; column ``j`` draws from seed ``seed ^ j``."""
    U = np.asarray(U, dtype=float)
    eps = _eps(epsilon, U)
    cols = U.reshape(U.shape[0], -1)
    noise = np.empty_like(cols)
    for j in range(cols.shape[1]):
        noise[:, j] = np.random.default_rng(seed ^ j).uniform(-1.0, 1.0, cols.shape[0])
    return U + eps * noise.reshape(U.shape)


def input_gradient(net: ImplicitNetwork, U, labels, cfg: Optional[IterationConfig] = None):
    """Per-sample gradient of the cross-entropy with respect to each input column."""
    U = np.asarray(U, dtype=float)
    if cfg is None:
        cfg = IterationConfig(alpha=default_alpha(net))
    X, Y, _ = forward_batch(net, U, cfg)
    _, G = softmax_crossentropy_batch(Y, labels)
    return implicit_backward(net, U, X, G, cfg).u


def attack_fgsm(net: ImplicitNetwork, U, labels, epsilon, cfg: Optional[IterationConfig] = None):
    U = np.asarray(U, dtype=float)
    return U + _eps(epsilon, U) * np.sign(input_gradient(net, U, labels, cfg))


def attack_pgdm(
    net: ImplicitNetwork,
    U,
    labels,
    epsilon,
    step=None,
    max_steps: int = 20,
    cfg: Optional[IterationConfig] = None,
):
    """Projected sign-gradient ascent started from ``delta = 0``."""
    U = np.asarray(U, dtype=float)
    eps = _eps(epsilon, U)
    step = eps / 4.0 if step is None else _eps(step, U)
    delta = np.zeros_like(U)
    for _ in range(max_steps):
        g = input_gradient(net, U + delta, labels, cfg)
        delta = np.clip(delta + step * np.sign(g), -eps, eps)
    return U + delta


def apply_attack(net: ImplicitNetwork, U, labels, spec: AttackSpec, epsilon=None, cfg=None):
    """Run ``spec`` on a batch; ``epsilon`` overrides ``spec.epsilon`` (scalar or per column)."""
    eps = spec.epsilon if epsilon is None else epsilon
    if spec.kind is AttackKind.INVERSION:
        return attack_inversion(U, eps)
    if spec.kind is AttackKind.UNIFORM_NOISE:
        return attack_uniform_noise(U, eps, spec.seed)
    if spec.kind is AttackKind.FGSM:
        return attack_fgsm(net, U, labels, eps, cfg)
    return attack_pgdm(net, U, labels, eps, spec.step, spec.max_steps, cfg)


@dataclass
class RobustnessCurve:
    epsilons: np.ndarray
    empirical_accuracy: np.ndarray
    certified_accuracy: np.ndarray
    attack_kind: str = ""

    def __post_init__(self):
        self.epsilons = np.asarray(self.epsilons, dtype=float)
        self.empirical_accuracy = np.asarray(self.empirical_accuracy, dtype=float)
        self.certified_accuracy = np.asarray(self.certified_accuracy, dtype=float)
        n = self.epsilons.shape[0]
        if self.empirical_accuracy.shape != (n,) or self.certified_accuracy.shape != (n,):
            raise ValueError("curve arrays must have equal lengths")
        if np.any(np.diff(self.epsilons) < 0) or np.any(self.epsilons < 0):
            raise ValueError("epsilons must be nonnegative and ascending")


def _predict(net, U, cfg):
    _, Y, _ = forward_batch(net, U, cfg)
    return np.argmax(Y, axis=0)


def robustness_curve(
    net: ImplicitNetwork,
    data: Dataset,
    attack: AttackSpec | AttackKind,
    epsilon_grid,
    cfg: Optional[IterationConfig] = None,
) -> RobustnessCurve:
    """Empirical accuracy under ``attack`` and certified accuracy along ``epsilon_grid``."""
    spec = attack if isinstance(attack, AttackSpec) else AttackSpec(attack)
    grid = np.asarray(epsilon_grid, dtype=float)
    U, labels = data.inputs, data.labels
    radii, Y = certified_radii(net, U, labels, cfg)
    clean_ok = np.argmax(Y, axis=0) == labels
    empirical, certified = [], []
    for eps in grid:
        U_adv = U if eps == 0 else apply_attack(net, U, labels, spec, eps, cfg)
        empirical.append(np.mean(_predict(net, U_adv, cfg) == labels))
        certified.append(np.mean(clean_ok & (radii >= eps)))
    return RobustnessCurve(grid, empirical, certified, spec.kind.value)


CURVE_COLUMNS = ("epsilon", "empirical_accuracy", "certified_accuracy", "attack_kind")


def curves_to_csv(curves) -> str:
    """Serialise curves; floats use ``repr`` so parsing and re-emitting is lossless."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for c in curves:
        for e, emp, cert in zip(c.epsilons, c.empirical_accuracy, c.certified_accuracy):
            w.writerow([repr(float(e)), repr(float(emp)), repr(float(cert)), c.attack_kind])
    return buf.getvalue()


def curves_from_csv(text: str) -> list[RobustnessCurve]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CURVE_COLUMNS:
        raise ValueError(f"expected header {','.join(CURVE_COLUMNS)}")
    grouped: dict[str, list] = {}
    for row in rows[1:]:
        grouped.setdefault(row[3], []).append([float(v) for v in row[:3]])
    curves = []
    for kind, vals in grouped.items():
        a = np.array(vals)
        curves.append(RobustnessCurve(a[:, 0], a[:, 1], a[:, 2], kind))
    return curves


def write_curves_csv(path, curves) -> None:
    Path(path).write_text(curves_to_csv(curves), encoding="utf-8")


def read_curves_csv(path) -> list[RobustnessCurve]:
    return curves_from_csv(Path(path).read_text(encoding="utf-8"))
