"""Strong- and weak-constraint 4D-Var costs, gradients and MAP checks.

The strong-constraint cost is a function of the initial state only; the model
is rolled forward deterministically. The weak-constraint cost is a function of
the whole stacked trajectory and penalizes model error with Q_t^-1. Both are
negative log-posterior densities up to an additive constant, so for linear
models their minimizers coincide with the Gaussian posterior means.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve

from .exact import joint_gaussian_trajectory_posterior, stacked_observation_operator, trajectory_normal_equations
from .gaussian import Gaussian, RandomSeed, symmetrize
from .models import LinearGaussianSSM, ObservationRecord
from .optim import OptimResult, OptimSettings, grad_fd, minimize
from .variational import IdentityReport

__all__ = [
    "LocalMinimum",
    "MultiStartResult",
    "VarCostSpec",
    "cost_strong",
    "cost_weak",
    "grad_fd",
    "grad_strong",
    "grad_weak_analytic",
    "minimize",
    "minimize_spec",
    "multistart",
    "perfect_model_x0_posterior",
    "prior_trajectory",
    "verify_map_equivalence",
    "weak_hessian_fd",
    "weak_precision_check",
]

MAP_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class VarCostSpec:
    """A 4D-Var problem: flavor, model and observation record.

    Inverse-covariance factors are computed once at construction.
    """

    flavor: str
    model: object
    observations: ObservationRecord
    _B: tuple = field(init=False, repr=False)
    _R: list = field(init=False, repr=False)
    _Q: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.flavor not in ("strong", "weak"):
            raise ValueError(f"flavor must be 'strong' or 'weak', got {self.flavor!r}")
        if self.observations.horizon != self.model.T:
            raise ValueError(f"record has horizon {self.observations.horizon}, model has {self.model.T}")
        Q = getattr(self.model, "Q", None)
        if self.flavor == "weak" and Q is None:
            raise ValueError("weak-constraint cost needs model-error covariances Q_t")
        object.__setattr__(self, "_B", cho_factor(self.model.B, lower=True))
        object.__setattr__(self, "_R", [cho_factor(R, lower=True) for R in self.model.R])
        object.__setattr__(self, "_Q", [cho_factor(q, lower=True) for q in Q] if self.flavor == "weak" else [])

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def dim(self) -> int:
        return self.n if self.flavor == "strong" else self.n * (self.T + 1)


def _background(spec, x0):
    d = x0 - spec.model.xb
    w = cho_solve(spec._B, d)
    return 0.5 * d @ w, w


def _innovation(spec, t, x):
    r = spec.observations.y[t] - spec.model.observe(t, x)
    return r, cho_solve(spec._R[t], r)


def _check_flavor(spec, flavor):
    if spec.flavor != flavor:
        raise ValueError(f"expected a {flavor}-constraint spec, got {spec.flavor}")


def cost_strong(x0, spec: VarCostSpec) -> float:
    """Background term plus observation misfits along the deterministic run from x0."""
    _check_flavor(spec, "strong")
    x = np.asarray(x0, dtype=float)
    J, _ = _background(spec, x)
    for t in range(spec.T + 1):
        if t > 0:
            x = spec.model.step(t - 1, x)
        r, w = _innovation(spec, t, x)
        J += 0.5 * r @ w
    return float(J)


def grad_strong(x0, spec: VarCostSpec) -> np.ndarray:
    """Adjoint gradient: step Jacobians are accumulated backwards in time."""
    _check_flavor(spec, "strong")
    model = spec.model
    x = np.asarray(x0, dtype=float)
    _, g = _background(spec, x)
    states = [x]
    for t in range(spec.T):
        states.append(model.step(t, states[-1]))
    lam = np.zeros(spec.n)
    for t in range(spec.T, -1, -1):
        if t < spec.T:
            lam = model.step_jacobian(t, states[t]).T @ lam
        _, w = _innovation(spec, t, states[t])
        lam = lam - model.obs_jacobian(t, states[t]).T @ w
    return g + lam


def cost_weak(traj, spec: VarCostSpec) -> float:
    """Background, model-error and observation quadratic forms over the stacked trajectory."""
    _check_flavor(spec, "weak")
    X = np.asarray(traj, dtype=float).reshape(spec.T + 1, spec.n)
    J, _ = _background(spec, X[0])
    for t in range(spec.T):
        e = X[t + 1] - spec.model.step(t, X[t])
        J += 0.5 * e @ cho_solve(spec._Q[t], e)
    for t in range(spec.T + 1):
        r, w = _innovation(spec, t, X[t])
        J += 0.5 * r @ w
    return float(J)


def grad_weak_analytic(traj, spec: VarCostSpec) -> np.ndarray:
    _check_flavor(spec, "weak")
    model = spec.model
    X = np.asarray(traj, dtype=float).reshape(spec.T + 1, spec.n)
    G = np.zeros_like(X)
    _, G[0] = _background(spec, X[0])
    for t in range(spec.T):
        w = cho_solve(spec._Q[t], X[t + 1] - model.step(t, X[t]))
        G[t + 1] += w
        G[t] -= model.step_jacobian(t, X[t]).T @ w
    for t in range(spec.T + 1):
        _, w = _innovation(spec, t, X[t])
        G[t] -= model.obs_jacobian(t, X[t]).T @ w
    return G.ravel()


def _cost_and_grad(spec):
    if spec.flavor == "strong":
        return (lambda x: cost_strong(x, spec)), (lambda x: grad_strong(x, spec))
    return (lambda x: cost_weak(x, spec)), (lambda x: grad_weak_analytic(x, spec))


def prior_trajectory(model) -> np.ndarray:
    """Deterministic run from the background state, stacked."""
    xs = [model.xb]
    for t in range(model.T):
        xs.append(model.step(t, xs[-1]))
    return np.concatenate(xs)


def _default_init(spec):
    return spec.model.xb.copy() if spec.flavor == "strong" else prior_trajectory(spec.model)


def minimize_spec(spec: VarCostSpec, init=None, settings: OptimSettings | None = None) -> OptimResult:
    cost, grad = _cost_and_grad(spec)
    return minimize(cost, grad, _default_init(spec) if init is None else init, settings)


def weak_hessian_fd(spec: VarCostSpec, traj, h=1e-5) -> np.ndarray:
    """Hessian of the weak cost by central differences of the analytic gradient."""
    traj = np.asarray(traj, dtype=float)
    cols = []
    for e in np.eye(traj.size):
        cols.append((grad_weak_analytic(traj + h * e, spec) - grad_weak_analytic(traj - h * e, spec)) / (2 * h))
    return symmetrize(np.column_stack(cols))


def perfect_model_x0_posterior(model: LinearGaussianSSM, obs: ObservationRecord) -> Gaussian:
    """Law of x_0 given y_{0:T} under the perfect (Q = 0) linear model.

    Obtained by conditioning the joint Gaussian of (x_0, y) with
    y = G x_0 + noise, G the stacked observation operator.
    """
    G = stacked_observation_operator(model)
    Rblk = block_diag(*model.R)
    BGt = model.B @ G.T
    S = cho_factor(symmetrize(G @ BGt + Rblk), lower=True)
    mean = model.xb + BGt @ cho_solve(S, obs.stacked() - G @ model.xb)
    cov = model.B - BGt @ cho_solve(S, BGt.T)
    return Gaussian(mean, cov)


def verify_map_equivalence(spec: VarCostSpec, settings: OptimSettings | None = None, tol=MAP_TOL) -> IdentityReport:
    """Minimize the 4D-Var cost and compare with the exact Gaussian posterior mean.

    The report's ``lhs`` is the max-abs deviation and ``rhs`` is zero. A
    non-converged optimization yields an infinite deviation.
    """
    if not isinstance(spec.model, LinearGaussianSSM):
        raise TypeError("MAP equivalence is checked on linear-Gaussian models only")
    if spec.flavor == "strong":
        oracle = perfect_model_x0_posterior(spec.model, spec.observations).mean
    else:
        oracle = joint_gaussian_trajectory_posterior(spec.model, spec.observations).mean
    res = minimize_spec(spec, settings=settings)
    dev = float(np.max(np.abs(res.x - oracle))) if res.converged else float("inf")
    return IdentityReport(f"{spec.flavor}-constraint MAP equals posterior mean", dev, 0.0, tolerance=tol,
                          extra={"optim": res.to_dict(), "oracle": oracle.tolist()})


def weak_precision_check(spec: VarCostSpec, traj=None) -> float:
    """Relative Frobenius error between the FD Hessian and the exact posterior precision."""
    prec, _ = trajectory_normal_equations(spec.model, spec.observations)
    H = weak_hessian_fd(spec, prior_trajectory(spec.model) if traj is None else traj)
    return float(np.linalg.norm(H - prec) / np.linalg.norm(prec))


@dataclass
class LocalMinimum:
    x: np.ndarray
    cost: float
    count: int

    def to_dict(self) -> dict:
        return {"argmin": self.x.tolist(), "cost": self.cost, "count": self.count}


@dataclass
class MultiStartResult:
    minima: list
    results: list

    def to_dict(self) -> dict:
        return {"minima": [m.to_dict() for m in self.minima], "runs": [r.to_dict() for r in self.results]}


def multistart(spec: VarCostSpec, starts: int, seed: RandomSeed, spread=1.0,
               settings: OptimSettings | None = None, cost_tol=1e-6, workers=None) -> MultiStartResult:
    """Run the optimizer from perturbed background starts and cluster the minima by cost.

    Start k is the default initial point plus ``spread`` times a draw from
    N(0, B) in every time block, seeded by ``seed.child(k)``; results do not
    depend on the worker count.
    """
    if starts < 1:
        raise ValueError("need at least one start")
    base = _default_init(spec)
    Lb = np.linalg.cholesky(spec.model.B)
    inits = []
    for k in range(starts):
        z = seed.child(k).rng().standard_normal(base.size)
        blocks = z.reshape(-1, spec.n) @ Lb.T
        inits.append(base + spread * blocks.ravel())
    cost, grad = _cost_and_grad(spec)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda x0: minimize(cost, grad, x0, settings), inits))
    minima = []
    for r in sorted((r for r in results if r.converged), key=lambda r: r.cost):
        if minima and abs(r.cost - minima[-1].cost) <= cost_tol:
            minima[-1].count += 1
        else:
            minima.append(LocalMinimum(r.x, r.cost, 1))
    return MultiStartResult(minima, results)
