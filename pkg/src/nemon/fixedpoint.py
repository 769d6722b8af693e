"""Averaged (Krasnosel'skii-Mann) fixed-point iteration and step-size calculus.

The averaged map ``F_a = (1 - a) I + a F`` has the same fixed points as ``F``
for every ``a in (0, 1]``. For a map with one-sided Lipschitz constant
``osl < 1`` and Lipschitz constant ``lip``:

* in any norm, small steps contract with factor :func:`gamma_contraction_factor`
  and :func:`optimal_alpha_general` gives the best such step;
* in a weighted infinity norm the much larger step
  ``1 / (1 - diagl)`` is admissible (:func:`optimal_alpha_linf`), where
  ``diagl`` lower-bounds the Jacobian diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import NormSpec, vector_norm

DIVERGENCE_THRESHOLD = 1e12


@dataclass(frozen=True)
class IterationConfig:
    alpha: float = 1.0
    tol: float = 1e-6
    max_iter: int = 500

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.max_iter) < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class IterationTrace:
    """Outcome of an averaged iteration run.

    ``residuals[k]`` is the norm of ``x_{k+1} - x_k``. ``diverged`` is set when
    the iterate became non-finite or a residual exceeded ``1e12``.
    """

    iterate: np.ndarray
    residuals: list[float] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def ratios(self) -> np.ndarray:
        r = np.asarray(self.residuals)
        with np.errstate(divide="ignore", invalid="ignore"):
            return r[1:] / r[:-1]


@dataclass(frozen=True)
class ContractionConstants:
    """One-sided Lipschitz, Lipschitz and diagonal constants of a map.

    ``lip_u`` is the input Lipschitz constant when the map is parametrised by
    an input (implicit networks); it is not used by the condition numbers.
    """

    osl: float
    lip: float
    diagl: float
    lip_u: float = float("nan")

    @property
    def kappa(self) -> float:
        if self.osl >= 1:
            return math.inf
        return (1.0 + self.lip) / (1.0 - self.osl)

    @property
    def kappa_inf(self) -> float:
        if self.osl >= 1:
            return math.inf
        return (1.0 - self.diagl) / (1.0 - self.osl)


def average_iteration(
    F: Callable[[np.ndarray], np.ndarray],
    x0,
    cfg: IterationConfig,
    norm: NormSpec | Callable[[np.ndarray], float],
) -> IterationTrace:
    """Run ``x <- (1 - alpha) x + alpha F(x)`` until the step is below ``cfg.tol``.

    ``norm`` is a :class:`NormSpec` or any callable returning the size of a
    step; the latter lets batched callers measure columns jointly.
    Divergence is reported through the trace, never raised.
    """
    measure = (lambda v: vector_norm(v, norm)) if isinstance(norm, NormSpec) else norm
    a = cfg.alpha
    x = np.array(x0, dtype=float)
    trace = IterationTrace(iterate=x)
    for _ in range(int(cfg.max_iter)):
        fx = np.asarray(F(x), dtype=float)
        # x + a (F(x) - x) leaves exact fixed points untouched
        x_next = fx if a == 1.0 else x + a * (fx - x)
        if not np.all(np.isfinite(x_next)):
            trace.diverged = True
            break
        res = float(measure(x_next - x))
        trace.residuals.append(res)
        x = x_next
        if res <= cfg.tol:
            trace.converged = True
            break
        if res > DIVERGENCE_THRESHOLD:
            trace.diverged = True
            break
    trace.iterate = x
    return trace


def _theorem1_domain(lip: float, c: float) -> float:
    s = lip + 1.0
    return c / ((c + s) * s)


def gamma_contraction_factor(alpha: float, lip: float, c: float) -> float:
    """Contraction factor of ``F_alpha`` guaranteed by ``osl(F) <= 1 - c``.

    ``(1 + alpha c - alpha^2 (lip+1)^2 / (1 - alpha (lip+1)))^-1``, defined
    for ``0 < alpha < c / ((c + lip + 1)(lip + 1))``.
    """
    if lip < 0 or c <= 0:
        raise ValueError("need lip >= 0 and c > 0")
    bound = _theorem1_domain(lip, c)
    if not 0.0 < alpha < bound:
        raise ValueError(f"alpha = {alpha} outside (0, {bound})")
    s = lip + 1.0
    return 1.0 / (1.0 + alpha * c - alpha**2 * s**2 / (1.0 - alpha * s))


def optimal_alpha_general(lip: float, osl: float) -> tuple[float, float]:
    """Best averaging step for a generic norm.

    Maximises ``xi(a) = 1 + a c - a^2 s^2 / (1 - a s)`` with ``c = 1 - osl``
    and ``s = lip + 1``; ``xi'(a) = c + s - s / (1 - a s)^2`` vanishes at
    ``a* = (1 - sqrt(s / (c + s))) / s``. Returns ``(a*, 1 / xi(a*))``.
    """
    if osl >= 1:
        raise ValueError(f"osl must be < 1, got {osl}")
    if lip < 0:
        raise ValueError("lip must be nonnegative")
    c = 1.0 - osl
    s = lip + 1.0
    alpha = (1.0 - math.sqrt(s / (c + s))) / s
    factor = gamma_contraction_factor(alpha, lip, c)
    kappa = s / c
    series = 1.0 - 1.0 / (4 * kappa**2) + 1.0 / (8 * kappa**3)
    # the expansion is only informative for large condition numbers
    if kappa >= 4 and abs(factor - series) > 2.0 / kappa**4:
        raise ArithmeticError(f"factor {factor} inconsistent with series value {series}")
    return alpha, factor


def optimal_alpha_linf(osl: float, diagl: float) -> tuple[float, float]:
    """Best averaging step in a weighted infinity norm.

    ``a* = 1 / (1 - diagl)`` (capped at 1) with factor ``1 - a* (1 - osl)``.
    """
    if osl >= 1:
        raise ValueError(f"osl must be < 1, got {osl}")
    if diagl > osl:
        raise ValueError(f"diagl = {diagl} exceeds osl = {osl}")
    alpha = min(1.0, 1.0 / (1.0 - diagl))
    return alpha, 1.0 - alpha * (1.0 - osl)


def perturbed_fixed_point_bound(lip_u: float, osl_x: float, input_distance: float) -> float:
    """Upper bound on ``||x*_u - x*_v||`` given ``||u - v|| = input_distance``."""
    if osl_x >= 1:
        raise ValueError(f"osl_x must be < 1, got {osl_x}")
    if lip_u < 0 or input_distance < 0:
        raise ValueError("lip_u and input_distance must be nonnegative")
    return lip_u / (1.0 - osl_x) * input_distance
