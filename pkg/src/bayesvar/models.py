"""State-space model descriptions, Lorenz-63 dynamics, and synthetic data.

Three model families are supported:

* :class:`LinearGaussianSSM` -- linear dynamics and observations with
  Gaussian background, model error and observation error.
* :class:`DiscreteHMM` -- a finite-state chain whose emission likelihoods are
  stored already evaluated at the realized observation symbols.
* :class:`NonlinearSSM` -- Lorenz-63 dynamics discretized by a fixed-step RK4
  scheme, linear observations, optional Gaussian model error.

All matrices that may vary in time are stored per step, even when constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaussian import Gaussian, RandomSeed, cholesky, log_pdf, symmetrize

__all__ = [
    "DiscreteHMM",
    "LinearGaussianSSM",
    "NonlinearSSM",
    "ObservationRecord",
    "emission_loglik",
    "load_model",
    "lorenz63_jacobian",
    "lorenz63_rhs",
    "lorenz63_step",
    "model_to_dict",
    "simulate",
]

STOCHASTIC_ATOL = 1e-12


def _as_list(value, count):
    """Broadcast a single matrix (or scalar) to ``count`` copies, or validate a list."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim <= 2:
        return [np.atleast_2d(arr).copy() for _ in range(count)]
    out = [np.atleast_2d(np.asarray(a, dtype=float)) for a in value]
    if len(out) != count:
        raise ValueError(f"expected {count} matrices, got {len(out)}")
    return out


@dataclass(frozen=True)
class ObservationRecord:
    """Observations y_0..y_T, one vector per time index."""

    y: tuple
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "y", tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in self.y))

    @property
    def horizon(self) -> int:
        return len(self.y) - 1

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.y)

    def to_dict(self) -> dict:
        return {"y": [v.tolist() for v in self.y], "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationRecord":
        return cls(tuple(d["y"]), d.get("seed"))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "ObservationRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


class _GaussianObsMixin:
    """Shared linear-observation behaviour for the continuous-state models."""

    def observe(self, t, x):
        return self.H[t] @ x

    def obs_jacobian(self, t, x):
        return self.H[t]

    def _check_obs(self):
        m = self.H[0].shape[0]
        for t, (H, R) in enumerate(zip(self.H, self.R)):
            if H.shape != (m, self.n):
                raise ValueError(f"H[{t}] has shape {H.shape}, expected {(m, self.n)}")
            if R.shape != (m, m):
                raise ValueError(f"R[{t}] has shape {R.shape}, expected {(m, m)}")
            cholesky(R, f"R[{t}]")

    @property
    def m(self) -> int:
        return self.H[0].shape[0]

    def prior(self) -> Gaussian:
        return Gaussian(self.xb, self.B)


@dataclass(frozen=True, eq=False)
class LinearGaussianSSM(_GaussianObsMixin):
    """x_0 ~ N(xb, B); x_{t+1} = A_t x_t + N(0, Q_t); y_t = H_t x_t + N(0, R_t)."""

    T: int
    xb: np.ndarray
    B: np.ndarray
    A: list
    Q: list
    H: list
    R: list
    kind: str = field(default="lgssm", init=False)

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("horizon must be nonnegative")
        xb = np.atleast_1d(np.asarray(self.xb, dtype=float))
        n = xb.size
        object.__setattr__(self, "xb", xb)
        object.__setattr__(self, "B", symmetrize(np.atleast_2d(self.B)))
        object.__setattr__(self, "A", _as_list(self.A, self.T))
        object.__setattr__(self, "Q", [symmetrize(q) for q in _as_list(self.Q, self.T)])
        object.__setattr__(self, "H", _as_list(self.H, self.T + 1))
        object.__setattr__(self, "R", [symmetrize(r) for r in _as_list(self.R, self.T + 1)])
        cholesky(self.B, "B")
        for t in range(self.T):
            if self.A[t].shape != (n, n) or self.Q[t].shape != (n, n):
                raise ValueError(f"A[{t}] / Q[{t}] must be {n}x{n}")
            cholesky(self.Q[t], f"Q[{t}]")
        self._check_obs()

    @property
    def n(self) -> int:
        return self.xb.size

    def step(self, t, x):
        return self.A[t] @ x

    def step_jacobian(self, t, x):
        return self.A[t]


def lorenz63_rhs(x, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    return np.array([sigma * (x[1] - x[0]), x[0] * (rho - x[2]) - x[1], x[0] * x[1] - beta * x[2]])


def _lorenz63_rhs_jac(x, sigma, rho, beta):
    return np.array([[-sigma, sigma, 0.0], [rho - x[2], -1.0, -x[0]], [x[1], x[0], -beta]])


def lorenz63_step(state, dt, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    """One classical RK4 step of the Lorenz-63 vector field."""
    if not dt > 0:
        raise ValueError(f"step size must be positive, got {dt}")
    x = np.asarray(state, dtype=float)
    f = lambda z: lorenz63_rhs(z, sigma, rho, beta)  # noqa: E731
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def lorenz63_jacobian(state, dt, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    """Exact Jacobian of :func:`lorenz63_step` with respect to ``state``."""
    if not dt > 0:
        raise ValueError(f"step size must be positive, got {dt}")
    x = np.asarray(state, dtype=float)
    f = lambda z: lorenz63_rhs(z, sigma, rho, beta)  # noqa: E731
    J = lambda z: _lorenz63_rhs_jac(z, sigma, rho, beta)  # noqa: E731
    eye = np.eye(3)
    k1 = f(x)
    x2 = x + 0.5 * dt * k1
    k2 = f(x2)
    x3 = x + 0.5 * dt * k2
    k3 = f(x3)
    x4 = x + dt * k3
    d1 = J(x)
    d2 = J(x2) @ (eye + 0.5 * dt * d1)
    d3 = J(x3) @ (eye + 0.5 * dt * d2)
    d4 = J(x4) @ (eye + dt * d3)
    return eye + dt / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4)


@dataclass(frozen=True, eq=False)
class NonlinearSSM(_GaussianObsMixin):
    """Lorenz-63 state-space model with one RK4 step of size ``dt`` per time index.

    ``Q`` may be ``None`` for a perfect model (strong-constraint setting).
    """

    T: int
    dt: float
    xb: np.ndarray
    B: np.ndarray
    H: list
    R: list
    Q: list | None = None
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    kind: str = field(default="lorenz63", init=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        xb = np.atleast_1d(np.asarray(self.xb, dtype=float))
        if xb.size != 3:
            raise ValueError("Lorenz-63 state is 3-dimensional")
        object.__setattr__(self, "xb", xb)
        object.__setattr__(self, "B", symmetrize(np.atleast_2d(self.B)))
        object.__setattr__(self, "H", _as_list(self.H, self.T + 1))
        object.__setattr__(self, "R", [symmetrize(r) for r in _as_list(self.R, self.T + 1)])
        if self.Q is not None:
            Q = [symmetrize(q) for q in _as_list(self.Q, self.T)]
            for t, q in enumerate(Q):
                cholesky(q, f"Q[{t}]")
            object.__setattr__(self, "Q", Q)
        cholesky(self.B, "B")
        self._check_obs()

    @property
    def n(self) -> int:
        return 3

    @property
    def params(self):
        return dict(sigma=self.sigma, rho=self.rho, beta=self.beta)

    def step(self, t, x):
        return lorenz63_step(x, self.dt, **self.params)

    def step_jacobian(self, t, x):
        return lorenz63_jacobian(x, self.dt, **self.params)


@dataclass(frozen=True, eq=False)
class DiscreteHMM:
    """Finite-state hidden Markov model with pre-evaluated emission log-likelihoods.

    Attributes:
        initial: probability vector p(x_0), shape (S,).
        transitions: T row-stochastic (S, S) matrices, entry [i, j] = p(x_{t+1}=j | x_t=i).
        logliks: array of shape (T+1, S), entry [t, s] = log p(y_t | x_t = s) at the
            realized y_t. ``-inf`` marks a zero-likelihood atom.
        emission: optional (S, K) emission matrix, used only to draw symbols.
    """

    initial: np.ndarray
    transitions: list
    logliks: np.ndarray
    emission: np.ndarray | None = None
    kind: str = field(default="hmm", init=False)

    def __post_init__(self):
        initial = np.asarray(self.initial, dtype=float)
        logliks = np.atleast_2d(np.asarray(self.logliks, dtype=float))
        transitions = [np.asarray(P, dtype=float) for P in self.transitions]
        S = initial.size
        if logliks.shape[1] != S:
            raise ValueError(f"logliks must have {S} columns")
        if len(transitions) != logliks.shape[0] - 1:
            raise ValueError("need exactly T transition matrices for T+1 observation times")
        if np.any(initial < 0) or abs(initial.sum() - 1.0) > STOCHASTIC_ATOL:
            raise ValueError("initial distribution must be a probability vector")
        for t, P in enumerate(transitions):
            if P.shape != (S, S) or np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > STOCHASTIC_ATOL):
                raise ValueError(f"transition {t} is not a row-stochastic {S}x{S} matrix")
        if np.any(np.isnan(logliks)) or np.any(logliks == np.inf):
            raise ValueError("log-likelihoods must be finite or -inf")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transitions", transitions)
        object.__setattr__(self, "logliks", logliks)
        if self.emission is not None:
            E = np.asarray(self.emission, dtype=float)
            if E.shape[0] != S or np.any(np.abs(E.sum(axis=1) - 1.0) > STOCHASTIC_ATOL):
                raise ValueError("emission matrix must be row-stochastic with S rows")
            object.__setattr__(self, "emission", E)

    @property
    def T(self) -> int:
        return self.logliks.shape[0] - 1

    @property
    def S(self) -> int:
        return self.initial.size

    @classmethod
    def from_emission(cls, initial, transitions, emission, symbols) -> "DiscreteHMM":
        """Build an HMM from a full emission matrix and an observed symbol sequence."""
        E = np.asarray(emission, dtype=float)
        with np.errstate(divide="ignore"):
            logliks = np.log(E[:, np.asarray(symbols, dtype=int)].T)
        return cls(initial, transitions, logliks, E)

    def with_observations(self, symbols) -> "DiscreteHMM":
        if self.emission is None:
            raise ValueError("model carries no emission matrix")
        return DiscreteHMM.from_emission(self.initial, self.transitions, self.emission, symbols)


def simulate(model, seed: RandomSeed):
    """Draw a truth trajectory from the prior path law and observations given it.

    Returns ``(truth, record)``. For a :class:`DiscreteHMM` the truth is an
    integer array of states, and observations are emission symbols (each as a
    length-1 vector) if the model carries an emission matrix, otherwise empty
    vectors since only pre-evaluated likelihoods are stored.
    """
    rng = seed.rng()
    if isinstance(model, DiscreteHMM):
        S = model.S
        x = np.empty(model.T + 1, dtype=int)
        x[0] = rng.choice(S, p=model.initial)
        for t in range(model.T):
            x[t + 1] = rng.choice(S, p=model.transitions[t][x[t]])
        if model.emission is not None:
            K = model.emission.shape[1]
            y = [np.array([rng.choice(K, p=model.emission[s])], dtype=float) for s in x]
        else:
            y = [np.empty(0) for _ in x]
        return x, ObservationRecord(tuple(y), seed.seed)

    n = model.n
    x = np.empty((model.T + 1, n))
    x[0] = model.xb + cholesky(model.B) @ rng.standard_normal(n)
    for t in range(model.T):
        x[t + 1] = model.step(t, x[t])
        if model.Q is not None:
            x[t + 1] += cholesky(model.Q[t]) @ rng.standard_normal(n)
    y = []
    for t in range(model.T + 1):
        L = cholesky(model.R[t])
        y.append(model.observe(t, x[t]) + L @ rng.standard_normal(L.shape[0]))
    return x, ObservationRecord(tuple(y), seed.seed)


def emission_loglik(model, t, state, obs: ObservationRecord | None = None) -> float:
    """log p(y_t | x_t = state). Gaussian models need the observation record."""
    if not 0 <= t <= model.T:
        raise IndexError(f"time index {t} outside [0, {model.T}]")
    if isinstance(model, DiscreteHMM):
        return float(model.logliks[t, int(state)])
    if obs is None:
        raise ValueError("Gaussian emission needs the observation record")
    x = np.atleast_1d(np.asarray(state, dtype=float))
    return log_pdf(Gaussian(model.observe(t, x), model.R[t]), obs.y[t])


# --- JSON -----------------------------------------------------------------

def _tolist(v):
    if v is None:
        return None
    if isinstance(v, list):
        return [np.asarray(a).tolist() for a in v]
    return np.asarray(v).tolist()


def model_to_dict(model) -> dict:
    if isinstance(model, DiscreteHMM):
        logliks = np.where(np.isneginf(model.logliks), None, model.logliks.astype(object))
        return {
            "kind": "hmm",
            "initial": _tolist(model.initial),
            "transitions": _tolist(model.transitions),
            "logliks": logliks.tolist(),
            "emission": _tolist(model.emission),
        }
    d = {"kind": model.kind, "T": model.T, "xb": _tolist(model.xb), "B": _tolist(model.B),
         "H": _tolist(model.H), "R": _tolist(model.R), "Q": _tolist(model.Q)}
    if isinstance(model, LinearGaussianSSM):
        d["A"] = _tolist(model.A)
    else:
        d.update(dt=model.dt, sigma=model.sigma, rho=model.rho, beta=model.beta)
    return d


def load_model(source):
    """Build a model from a dict, a JSON string, or a path to a JSON file.

    ``null`` entries in HMM ``logliks`` denote zero-likelihood atoms.
    """
    if isinstance(source, (str, Path)):
        text = str(source)
        d = json.loads(text) if text.lstrip().startswith("{") else json.loads(Path(source).read_text())
    else:
        d = dict(source)
    kind = d.get("kind")
    if kind == "hmm":
        if "symbols" in d:
            return DiscreteHMM.from_emission(d["initial"], d["transitions"], d["emission"], d["symbols"])
        logliks = np.array([[-np.inf if v is None else v for v in row] for row in d["logliks"]], dtype=float)
        return DiscreteHMM(d["initial"], d["transitions"], logliks, d.get("emission"))
    if kind == "lgssm":
        return LinearGaussianSSM(d["T"], d["xb"], d["B"], d["A"], d["Q"], d["H"], d["R"])
    if kind == "lorenz63":
        return NonlinearSSM(d["T"], d["dt"], d["xb"], d["B"], d["H"], d["R"], d.get("Q"),
                            d.get("sigma", 10.0), d.get("rho", 28.0), d.get("beta", 8.0 / 3.0))
    raise ValueError(f"unknown model kind {kind!r}")
