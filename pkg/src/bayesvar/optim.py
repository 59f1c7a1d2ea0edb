"""Unconstrained quasi-Newton minimization and finite-difference gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimResult", "OptimSettings", "grad_fd", "minimize"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimSettings:
    gtol: float = 1e-8
    max_iter: int = 500
    armijo: float = 1e-4
    max_backtracks: int = 60
    # relative cost change treated as roundoff by the line search
    cost_noise: float = 1e-14


@dataclass
class OptimResult:
    x: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    costs: list = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "argmin": self.x.tolist(),
            "cost": self.cost,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
        }


def grad_fd(cost, point, h=1e-5) -> np.ndarray:
    """Central-difference gradient, O(h^2) truncation error per coordinate."""
    if not h > 0:
        raise ValueError("step must be positive")
    x = np.asarray(point, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (cost(x + e) - cost(x - e)) / (2 * h)
    return g


def _line_search(cost, grad, x, f0, g0, d, settings):
    """Line search along ``d`` returning ``(alpha, f, g)`` or ``None``.

    The unit step is tried together with the secant step that zeroes the
    directional derivative (exact on quadratics). A step is accepted under
    sufficient decrease, or under the approximate Wolfe conditions when the
    change in cost is below roundoff ``noise``; among acceptable trials the one
    with the flatter directional derivative wins. Steps that remain too steep
    are expanded, failing ones are backtracked.
    """
    slope = g0 @ d
    c1, c2 = settings.armijo, 0.9
    noise = settings.cost_noise * (abs(f0) + 1.0)

    def acceptable(alpha, f, g):
        if not np.isfinite(f):
            return False
        if f <= f0 + c1 * alpha * slope:
            return True
        dd = g @ d
        return f <= f0 + noise and c2 * slope <= dd <= (2 * c1 - 1) * slope

    def evaluate(alpha):
        f = cost(x + alpha * d)
        g = np.asarray(grad(x + alpha * d), dtype=float) if np.isfinite(f) else np.full_like(g0, np.nan)
        return alpha, f, g

    trials = [evaluate(1.0)]
    f1, g1 = trials[0][1:]
    d1 = g1 @ d
    if np.isfinite(f1) and d1 > slope:
        a_s = slope / (slope - d1)
        if 0 < a_s < 1e3 and abs(a_s - 1.0) > 1e-10:
            trials.append(evaluate(a_s))
    good = [t for t in trials if acceptable(*t)]
    if good:
        alpha, fa, ga = min(good, key=lambda t: abs(t[2] @ d))
    else:
        alpha = min(t[0] for t in trials)
        for _ in range(settings.max_backtracks):
            alpha *= 0.5
            fa = cost(x + alpha * d)
            if np.isfinite(fa) and fa <= f0 + c1 * alpha * slope:
                return alpha, fa, np.asarray(grad(x + alpha * d), dtype=float)
        return None

    for _ in range(settings.max_backtracks):
        if ga @ d >= c2 * slope:
            break
        trial = 2.0 * alpha
        ft = cost(x + trial * d)
        if not (np.isfinite(ft) and ft <= f0 + c1 * trial * slope) or ft > fa:
            break
        alpha, fa = trial, ft
        ga = np.asarray(grad(x + alpha * d), dtype=float)
    return alpha, fa, ga


def minimize(cost, grad, init, settings: OptimSettings | None = None) -> OptimResult:
    """BFGS on the inverse Hessian with a Wolfe-type line search.

    The cost sequence is nonincreasing up to the roundoff allowance
    ``settings.cost_noise * (|f| + 1)`` per step. Failure to find an acceptable
    step, or reaching the iteration cap, yields ``converged=False`` with a
    message rather than an exception.
    """
    settings = settings or OptimSettings()
    x = np.array(init, dtype=float)
    f = float(cost(x))
    if not np.isfinite(f):
        raise ValueError("cost is not finite at the initial point")
    g = np.asarray(grad(x), dtype=float)
    n = x.size
    Hinv = np.eye(n)
    costs = [f]
    first = True
    for it in range(settings.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < settings.gtol:
            return OptimResult(x, f, gnorm, it, True, costs, "gradient tolerance reached")
        if it == settings.max_iter:
            break
        d = -Hinv @ g
        if g @ d >= 0:
            # lost descent: restart from steepest descent
            Hinv = np.eye(n)
            d = -g
        step = _line_search(cost, grad, x, f, g, d, settings)
        if step is None:
            return OptimResult(x, f, gnorm, it, False, costs, "line search failed")
        alpha, f_new, g_new = step
        s = alpha * d
        x_new = x + s
        yv = g_new - g
        sy = s @ yv
        if sy > 1e-300:
            if first:
                Hinv = (sy / (yv @ yv)) * np.eye(n)
                first = False
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = x_new, float(f_new), g_new
        costs.append(f)
        if not s.any():
            gnorm = float(np.linalg.norm(g))
            return OptimResult(x, f, gnorm, it + 1, gnorm < settings.gtol, costs, "zero step")
    gnorm = float(np.linalg.norm(g))
    log.debug("optimizer stopped without convergence, |g|=%.3e", gnorm)
    return OptimResult(x, f, gnorm, settings.max_iter, gnorm < settings.gtol, costs, "iteration cap reached")
