"""Optimization algebra for the auxiliary-gradient gain.

For an update theta' = theta + eta * (g_RL + lambda * g_MTP) on an L-smooth
objective, the auxiliary head shifts the per-step improvement lower bound by

    delta(lambda) = eta * lambda * (1 - L*eta) * c  -  (L * eta^2 * lambda^2 / 2) * v2

with c = <g_RL, g_MTP> and v2 = ||g_MTP||^2: a downward-opening parabola in
lambda whose maximizer and maximum have closed forms. Everything here is exact
scalar arithmetic; the only numerics live in ``estimate_curvature``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .policy import ForwardCounter, Head, ModelConfig, ParamVector
from .rlgrad import RolloutBatch, plain_gradient


class UndefinedOptimumError(ValueError):
    """The gain parabola degenerates (v2 = 0) and has no finite maximizer."""


def _check_eta_l(eta: float, L: float) -> None:
    # The bound's coefficients flip sign at L*eta = 1; fail fast instead.
    if eta <= 0.0 or L <= 0.0:
        raise ValueError("eta and L must be positive")
    if L * eta >= 1.0:
        raise ValueError(f"require L*eta < 1, got {L * eta}")


@dataclass(frozen=True)
class GainInputs:
    c: float
    v2: float
    eta: float
    L: float
    lam: float

    def __post_init__(self) -> None:
        if self.v2 < 0.0:
            raise ValueError("v2 must be nonnegative")
        _check_eta_l(self.eta, self.L)


@dataclass(frozen=True)
class GainDecomposition:
    first_order: float
    second_order: float
    delta_mtp: float
    lambda_star: float
    gain_at_optimum: float


def delta_terms(c: float, v2: float, eta: float, L: float, lam: float) -> tuple[float, float]:
    """(first-order correlation term, second-order penalty term), unvalidated."""
    first = eta * lam * (1.0 - L * eta) * c
    second = -(L * eta * eta * lam * lam / 2.0) * v2
    return first, second


def lambda_star(c: float, v2: float, eta: float, L: float) -> float:
    """Maximizer of the gain parabola; shares the sign of c."""
    _check_eta_l(eta, L)
    if v2 <= 0.0:
        raise UndefinedOptimumError("v2 = 0: the parabola has no finite maximizer")
    return (1.0 - L * eta) * c / (L * eta * v2)


def gain_at_optimum(c: float, v2: float, eta: float, L: float) -> float:
    """Maximum of the gain parabola, (1-L*eta)^2 c^2 / (2 L v2); even in c."""
    _check_eta_l(eta, L)
    if v2 <= 0.0:
        raise UndefinedOptimumError("v2 = 0: the parabola has no finite maximizer")
    return (1.0 - L * eta) ** 2 * c * c / (2.0 * L * v2)


def positivity_threshold(c: float, v2: float, eta: float, L: float) -> float:
    """The lambda bound below which the gain is positive (for c > 0): 2 lambda*."""
    return 2.0 * lambda_star(c, v2, eta, L)


def delta_mtp(inputs: GainInputs) -> GainDecomposition:
    first, second = delta_terms(inputs.c, inputs.v2, inputs.eta, inputs.L, inputs.lam)
    if inputs.v2 == 0.0:
        if inputs.c != 0.0:
            raise UndefinedOptimumError("v2 = 0 with c != 0: gain is unbounded in lambda")
        star, best = 0.0, 0.0
    else:
        star = lambda_star(inputs.c, inputs.v2, inputs.eta, inputs.L)
        best = gain_at_optimum(inputs.c, inputs.v2, inputs.eta, inputs.L)
    return GainDecomposition(first_order=first, second_order=second,
                             delta_mtp=first + second, lambda_star=star,
                             gain_at_optimum=best)


def smoothness_bound_check(value_fn: Callable[[np.ndarray], float],
                           grad_fn: Callable[[np.ndarray], np.ndarray],
                           theta: np.ndarray, theta_prime: np.ndarray,
                           L: float) -> tuple[float, float, bool]:
    """Evaluate both sides of the L-smooth lower bound J(theta') >= rhs."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_prime = np.asarray(theta_prime, dtype=np.float64)
    step = theta_prime - theta
    lhs = float(value_fn(theta_prime))
    rhs = (float(value_fn(theta)) + float(np.dot(grad_fn(theta), step))
           - 0.5 * L * float(np.dot(step, step)))
    return lhs, rhs, lhs >= rhs - 1e-12


def concave_quadratic(L: float):
    """J(theta) = -(L/2) ||theta||^2: the bound holds with equality everywhere."""

    def value(theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return -0.5 * L * float(np.dot(theta, theta))

    def grad(theta: np.ndarray) -> np.ndarray:
        return -L * np.asarray(theta, dtype=np.float64)

    return value, grad


def estimate_curvature(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                       probes: int, fd_step: float, power_iters: int = 4,
                       seed: int = 0) -> float:
    """Largest curvature magnitude via power iteration on finite-difference
    Hessian-vector products ||grad(theta + h d) - grad(theta)|| / h.

    Each probe runs its own deterministic chain (probe k is identical no
    matter how many probes run), and the estimate is the max over probes, so
    adding probes never lowers it.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    g0 = np.asarray(grad_fn(theta), dtype=np.float64)
    best = 0.0
    for p in range(probes):
        rng = np.random.default_rng([seed, p])
        d = rng.normal(size=theta.size)
        d /= np.linalg.norm(d)
        est = 0.0
        for _ in range(power_iters):
            hv = (np.asarray(grad_fn(theta + fd_step * d)) - g0) / fd_step
            est = float(np.linalg.norm(hv))
            if est < 1e-14:
                break
            d = hv / est
        best = max(best, est)
    return best


def estimate_L(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
               probes: int = 2, fd_step: float = 1e-4, power_iters: int = 3,
               seed: int = 0, counter: ForwardCounter | None = None) -> float:
    """Curvature scale of the plain RL surrogate on this batch.

    Offline instrumentation only; the adaptive-coefficient runtime path never
    needs L (the unknown prefactor is absorbed into the global ratio).
    """

    def grad_fn(values: np.ndarray) -> np.ndarray:
        return plain_gradient(params.with_values(values), config, batch,
                              Head.MAIN, counter)

    return estimate_curvature(grad_fn, params.values, probes, fd_step,
                              power_iters, seed)
