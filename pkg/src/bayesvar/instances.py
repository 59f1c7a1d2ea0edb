"""Random problem generators and the bundled JSON fixture library."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .models import DiscreteHMM, LinearGaussianSSM

__all__ = [
    "fixture_names",
    "load_fixture",
    "perturbed_policy",
    "random_hmm",
    "random_lgssm",
    "random_mdp",
    "random_spd",
    "random_stochastic",
]


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T / n + 0.5 * np.eye(n))


def random_stochastic(rng, rows, cols, alpha=1.0):
    return rng.dirichlet(alpha * np.ones(cols), size=rows)


def random_hmm(rng, S, T, alpha=1.0):
    initial = rng.dirichlet(alpha * np.ones(S))
    transitions = [random_stochastic(rng, S, S, alpha) for _ in range(T)]
    logliks = np.log(rng.uniform(0.05, 1.0, size=(T + 1, S)))
    return DiscreteHMM(initial, transitions, logliks)


def random_lgssm(rng, n, m, T):
    A = [np.eye(n) * 0.9 + 0.1 * rng.standard_normal((n, n)) for _ in range(T)]
    Q = [random_spd(rng, n, 0.3) for _ in range(T)]
    H = [rng.standard_normal((m, n)) for _ in range(T + 1)]
    R = [random_spd(rng, m, 0.5) for _ in range(T + 1)]
    return LinearGaussianSSM(T, rng.standard_normal(n), random_spd(rng, n), A, Q, H, R)


def random_mdp(rng, S, A, T, cost_scale=1.0):
    from .klcontrol import FiniteMDP

    return FiniteMDP(
        rng.dirichlet(np.ones(S)),
        [random_stochastic(rng, S, A) for _ in range(T)],
        [rng.dirichlet(np.ones(S), size=(S, A)) for _ in range(T)],
        cost_scale * rng.standard_normal((T + 1, S)),
    )


def _fixture_dir():
    return resources.files("bayesvar") / "fixtures"


def fixture_names() -> list:
    return sorted(p.name[:-5] for p in _fixture_dir().iterdir() if p.name.endswith(".json"))


def load_fixture(name: str) -> dict:
    path = _fixture_dir() / f"{name}.json"
    if not path.is_file():
        raise KeyError(f"no bundled fixture named {name!r}; available: {', '.join(fixture_names())}")
    return json.loads(path.read_text())


def perturbed_policy(rng, policy, scale=0.3):
    """Multiply each policy row by log-normal noise and renormalize."""
    from .klcontrol import Policy

    probs = []
    for p in policy.probs:
        q = p * np.exp(scale * rng.standard_normal(p.shape))
        probs.append(q / q.sum(axis=1, keepdims=True))
    return Policy(probs)
