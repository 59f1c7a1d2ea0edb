"""Finite state-action KL-regularized control and Gibbs laws.

A :class:`FiniteMDP` with passive action kernels mu_t(a|x) and transitions
P_t(x'|x,a) induces, under any policy pi, a law on state-action paths
(x_0, a_0, x_1, ..., a_{T-1}, x_T). Path laws are stored as dense arrays with
axes ``(S, A, S, A, ..., S)``; flattening in C order gives the lexicographic
path order used by :func:`bayesvar.exact.enumerate_paths` for the state
marginal.

The objective E[sum_t l_t(X_t)] + KL(q_pi || p_0) is minimized by the soft
Bellman policy, whose path law is the Gibbs law p_0 exp(-sum l) / Z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .exact import ENUMERATION_LIMIT, DiscreteDistribution, hmm_path_posterior_enumerate
from .gaussian import RandomSeed
from .models import STOCHASTIC_ATOL, DiscreteHMM
from .variational import IDENTITY_TOL, AdmissibilityError, IdentityReport, eval_Jt_discrete, kl_discrete

__all__ = [
    "BellmanBracketResult",
    "DesirabilityReport",
    "FiniteMDP",
    "Policy",
    "PosteriorRecovery",
    "SoftBellmanError",
    "ValueFunction",
    "bellman_bracket_grid_check",
    "desirability_mismatch_check",
    "gibbs_identity_check",
    "induced_path_law",
    "kl_decomposition_check",
    "load_mdp",
    "policy_objective_exact",
    "posterior_recovery_check",
    "passive_mdp",
    "representable_mdp",
    "reward_gibbs_law",
    "rl_one_step_check",
    "rl_restricted_family_check",
    "soft_bellman",
    "state_action_gibbs_law",
    "tempered_gibbs",
    "tempered_identity_check",
]


class SoftBellmanError(ValueError):
    """The soft Bellman normalizer vanished at some (t, x)."""


def _stochastic(rows, name):
    rows = np.asarray(rows, dtype=float)
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > STOCHASTIC_ATOL):
        raise ValueError(f"{name} is not row-stochastic")
    return rows


@dataclass(frozen=True, eq=False)
class FiniteMDP:
    """Horizon-T MDP on S states and A actions with stage costs l_t, t = 0..T."""

    initial: np.ndarray
    passive: list
    transitions: list
    costs: np.ndarray

    def __post_init__(self):
        initial = _stochastic(self.initial, "initial law")
        S = initial.size
        costs = np.atleast_2d(np.asarray(self.costs, dtype=float))
        T = costs.shape[0] - 1
        if costs.shape[1] != S or not np.all(np.isfinite(costs)):
            raise ValueError(f"costs must be a finite (T+1, {S}) array")
        if len(self.passive) != T or len(self.transitions) != T:
            raise ValueError(f"need {T} passive kernels and {T} transition arrays")
        passive = [_stochastic(m, f"passive kernel {t}") for t, m in enumerate(self.passive)]
        transitions = [_stochastic(P, f"transition {t}") for t, P in enumerate(self.transitions)]
        A = passive[0].shape[1] if T else 1
        for t in range(T):
            if passive[t].shape != (S, A) or transitions[t].shape != (S, A, S):
                raise ValueError(f"kernel shapes at t={t} must be ({S}, {A}) and ({S}, {A}, {S})")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "passive", passive)
        object.__setattr__(self, "transitions", transitions)

    @property
    def T(self) -> int:
        return self.costs.shape[0] - 1

    @property
    def S(self) -> int:
        return self.initial.size

    @property
    def A(self) -> int:
        return self.passive[0].shape[1] if self.T else 1

    def with_costs(self, costs) -> "FiniteMDP":
        return FiniteMDP(self.initial, self.passive, self.transitions, costs)

    def to_dict(self) -> dict:
        return {
            "kind": "mdp",
            "initial": self.initial.tolist(),
            "passive": [m.tolist() for m in self.passive],
            "transitions": [P.tolist() for P in self.transitions],
            "costs": self.costs.tolist(),
        }


def load_mdp(source) -> FiniteMDP:
    """Build an MDP from a dict, a JSON string, or a path to a JSON file."""
    if isinstance(source, (str, Path)):
        text = str(source)
        source = json.loads(text) if text.lstrip().startswith("{") else json.loads(Path(source).read_text())
    return FiniteMDP(source["initial"], source["passive"], source["transitions"], source["costs"])


@dataclass(frozen=True, eq=False)
class Policy:
    probs: list

    def __post_init__(self):
        object.__setattr__(self, "probs", [_stochastic(p, f"policy at t={t}") for t, p in enumerate(self.probs)])

    @classmethod
    def passive(cls, mdp: FiniteMDP) -> "Policy":
        return cls(mdp.passive)


@dataclass(frozen=True, eq=False)
class ValueFunction:
    values: np.ndarray
    # G_t(x, a) = E[V_{t+1}(X') | x, a] for t < T
    q_values: list = field(default_factory=list)


def _check_policy(mdp, policy):
    if len(policy.probs) != mdp.T:
        raise ValueError(f"policy has {len(policy.probs)} steps, horizon is {mdp.T}")
    for t, (pi, mu) in enumerate(zip(policy.probs, mdp.passive)):
        if pi.shape != mu.shape:
            raise ValueError(f"policy at t={t} has shape {pi.shape}, expected {mu.shape}")
        if np.any((pi > 0) & (mu <= 0)):
            raise AdmissibilityError(f"policy at t={t} puts mass on actions excluded by the passive kernel")


# --- soft Bellman -----------------------------------------------------------

def _backward(mdp: FiniteMDP, swapped=False):
    """Backward recursion; ``swapped`` moves the expectation inside the exponential."""
    V = np.empty((mdp.T + 1, mdp.S))
    V[mdp.T] = mdp.costs[mdp.T]
    G_all, policies = [None] * mdp.T, [None] * mdp.T
    for t in range(mdp.T - 1, -1, -1):
        mu, P = mdp.passive[t], mdp.transitions[t]
        with np.errstate(divide="ignore"):
            log_mu = np.log(mu)
        if swapped:
            # log E_{x'}[exp(-V_{t+1}(x'))] for each (x, a)
            with np.errstate(divide="ignore"):
                G = -logsumexp(-V[t + 1][None, None, :], b=P, axis=2)
        else:
            G = P @ V[t + 1]
        logits = log_mu - G
        norm = logsumexp(logits, axis=1)
        bad = np.flatnonzero(~np.isfinite(norm))
        if bad.size:
            raise SoftBellmanError(f"soft Bellman normalizer is zero at (t={t}, x={bad[0]})")
        V[t] = mdp.costs[t] - norm
        G_all[t] = G
        policies[t] = np.exp(logits - norm[:, None])
    return ValueFunction(V, G_all), Policy(policies)


def soft_bellman(mdp: FiniteMDP):
    """Optimal cost-to-go and policy of the action-KL control problem.

    V_T = l_T and V_t(x) = l_t(x) - log sum_a mu_t(a|x) exp(-G_t(x, a)) with
    G_t(x, a) = sum_x' P_t(x'|x, a) V_{t+1}(x'); the optimal policy is
    proportional to mu_t(a|x) exp(-G_t(x, a)).
    """
    return _backward(mdp)


# --- path laws ----------------------------------------------------------------

def _guard(mdp):
    size = mdp.S ** (mdp.T + 1) * mdp.A ** mdp.T
    if size > ENUMERATION_LIMIT:
        raise ValueError(f"{size} state-action paths exceeds the enumeration limit {ENUMERATION_LIMIT}")


def _action_axes(T):
    return tuple(range(1, 2 * T, 2))


def induced_path_law(mdp: FiniteMDP, policy: Policy):
    """Joint state-action path law of ``policy`` and its state-path marginal.

    Returns ``(joint, states)`` with ``joint`` of shape (S, A, S, ..., S) and
    ``states`` of shape (S,)*(T+1).
    """
    _guard(mdp)
    _check_policy(mdp, policy)
    law = mdp.initial
    for t in range(mdp.T):
        law = law[..., :, None] * policy.probs[t]
        law = law[..., :, :, None] * mdp.transitions[t]
    return law, law.sum(axis=_action_axes(mdp.T))


def _path_cost(mdp):
    """sum_t l_t(x_t) broadcast over the state-action path array."""
    T = mdp.T
    shape = [mdp.S if k % 2 == 0 else mdp.A for k in range(2 * T + 1)]
    total = np.zeros(shape)
    for t in range(T + 1):
        view = [1] * len(shape)
        view[2 * t] = mdp.S
        total = total + mdp.costs[t].reshape(view)
    return total


def _stepwise_kl(mdp, policy, joint):
    """sum_t E_q[KL(pi_t(.|X_t) || mu_t(.|X_t))] from the time-t state marginals."""
    total = 0.0
    for t in range(mdp.T):
        keep = 2 * t
        marg = joint.sum(axis=tuple(k for k in range(joint.ndim) if k != keep))
        row_kl = np.array([kl_discrete(p, m) for p, m in zip(policy.probs[t], mdp.passive[t])])
        total += float(marg @ row_kl)
    return total


def policy_objective_exact(mdp: FiniteMDP, policy: Policy) -> float:
    """E[sum_t l_t(X_t)] + E[sum_t log(pi_t / mu_t)] by summation over all paths."""
    joint, _ = induced_path_law(mdp, policy)
    passive, _ = induced_path_law(mdp, Policy.passive(mdp))
    cost = float(np.sum(joint * _path_cost(mdp)))
    return cost + kl_discrete(joint.ravel(), passive.ravel())


def kl_decomposition_check(mdp: FiniteMDP, policy: Policy, tol=IDENTITY_TOL) -> IdentityReport:
    """Path-space KL(q_pi || p_0) against the sum of expected per-step action KLs."""
    joint, _ = induced_path_law(mdp, policy)
    passive, _ = induced_path_law(mdp, Policy.passive(mdp))
    lhs = kl_discrete(joint.ravel(), passive.ravel())
    return IdentityReport("path KL decomposition", lhs, _stepwise_kl(mdp, policy, joint), kl=lhs, tolerance=tol)


def tempered_gibbs(mdp: FiniteMDP, alpha=1.0, beta=1.0):
    """Gibbs law p_0 exp(-(beta/alpha) sum l) / Z on state-action paths.

    Returns ``(law, log_z)``.
    """
    if not (alpha > 0 and beta > 0):
        raise ValueError("temperatures must be positive")
    passive, _ = induced_path_law(mdp, Policy.passive(mdp))
    with np.errstate(divide="ignore"):
        logw = np.log(passive) - (beta / alpha) * _path_cost(mdp)
    log_z = float(logsumexp(logw))
    return np.exp(logw - log_z), log_z


def state_action_gibbs_law(mdp: FiniteMDP):
    return tempered_gibbs(mdp, 1.0, 1.0)


def _gibbs_objective(mdp, q, passive, alpha=1.0, beta=1.0):
    q = np.asarray(q, dtype=float).reshape(passive.shape)
    return beta * float(np.sum(q * _path_cost(mdp))) + alpha * kl_discrete(q.ravel(), passive.ravel())


def tempered_identity_check(mdp: FiniteMDP, q, alpha=1.0, beta=1.0, tol=IDENTITY_TOL) -> IdentityReport:
    """beta E_q[sum l] + alpha KL(q || p_0) against alpha (KL(q || q*) - log Z)."""
    passive, _ = induced_path_law(mdp, Policy.passive(mdp))
    gibbs, log_z = tempered_gibbs(mdp, alpha, beta)
    kl = kl_discrete(np.ravel(q), gibbs.ravel())
    lhs = _gibbs_objective(mdp, q, passive, alpha, beta)
    return IdentityReport("Gibbs identity", lhs, alpha * (kl - log_z), evidence=log_z, kl=kl, tolerance=tol,
                          extra={"alpha": alpha, "beta": beta})


def gibbs_identity_check(mdp: FiniteMDP, q, tol=IDENTITY_TOL) -> IdentityReport:
    return tempered_identity_check(mdp, q, 1.0, 1.0, tol)


# --- posterior recovery -------------------------------------------------------

def representable_mdp(hmm: DiscreteHMM) -> FiniteMDP:
    """Companion MDP in which every action picks the next state.

    P_t(x'|x, a) = 1{x' = a} and l(x) = -log p(y | x). Because the initial law
    of an MDP is not controlled, x_0 is also drawn by an action: the MDP has
    horizon T+1, starts in state 0 with zero cost, and its first passive kernel
    is the HMM initial law. The later passive kernels are the HMM transitions.
    The state path (x_0, ..., x_T) of the HMM is axes 2, 4, ... of the path law.
    """
    S = hmm.S
    pick = np.broadcast_to(np.eye(S)[None, :, :], (S, S, S))
    start = np.tile(hmm.initial, (S, 1))
    costs = np.vstack([np.zeros(S), -hmm.logliks])
    return FiniteMDP(np.eye(S)[0], [start, *hmm.transitions], [pick] * (hmm.T + 1), costs)


def passive_mdp(hmm: DiscreteHMM) -> FiniteMDP:
    """Single-action MDP whose transitions are the HMM's own (no control authority)."""
    S = hmm.S
    return FiniteMDP(hmm.initial, [np.ones((S, 1))] * hmm.T, [P[:, None, :] for P in hmm.transitions],
                     -hmm.logliks)


@dataclass
class PosteriorRecovery:
    representable: IdentityReport
    nonrepresentable_kl: float

    @property
    def passed(self) -> bool:
        return self.representable.passed and self.nonrepresentable_kl > 0

    def to_dict(self) -> dict:
        return {"representable": self.representable.to_dict(), "nonrepresentable_kl": self.nonrepresentable_kl,
                "passed": self.passed}


def posterior_recovery_check(hmm: DiscreteHMM, nonrepresentable: DiscreteHMM | None = None,
                             tol=IDENTITY_TOL) -> PosteriorRecovery:
    """Optimal state-path law of the companion MDP against the smoothing posterior.

    The representable report's ``lhs`` is the max-abs difference between the
    two path laws. The KL gap is computed for the single-action MDP built from
    ``nonrepresentable`` (default: ``hmm`` itself).
    """
    _, post, log_z = hmm_path_posterior_enumerate(hmm)
    mdp = representable_mdp(hmm)
    _, policy = soft_bellman(mdp)
    _, states = induced_path_law(mdp, policy)
    # drop the deterministic start state
    dev = float(np.max(np.abs(states[0].ravel() - post.probs)))
    rep = IdentityReport("representable posterior recovery", dev, 0.0, evidence=log_z, tolerance=tol)

    other = hmm if nonrepresentable is None else nonrepresentable
    _, post2, _ = hmm_path_posterior_enumerate(other)
    mdp2 = passive_mdp(other)
    _, policy2 = soft_bellman(mdp2)
    _, states2 = induced_path_law(mdp2, policy2)
    return PosteriorRecovery(rep, kl_discrete(states2.ravel(), post2.probs))


# --- desirability caveat --------------------------------------------------------

@dataclass
class DesirabilityReport:
    correct: np.ndarray
    swapped: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        """correct - swapped, nonnegative by Jensen's inequality."""
        return self.correct - self.swapped

    @property
    def max_gap(self) -> float:
        return float(self.gap.max())

    def to_dict(self) -> dict:
        return {"correct": self.correct.tolist(), "swapped": self.swapped.tolist(), "max_gap": self.max_gap}


def desirability_mismatch_check(mdp: FiniteMDP) -> DesirabilityReport:
    """Compare the soft Bellman values with the recursion that uses E[exp(-V)] in place of exp(-E[V])."""
    return DesirabilityReport(_backward(mdp)[0].values, _backward(mdp, swapped=True)[0].values)


# --- one-step Bellman bracket -------------------------------------------------------

def _simplex_grid(A, resolution):
    k = int(round(1 / resolution))
    if A == 2:
        a = np.arange(k + 1) / k
        return np.column_stack([a, 1 - a])
    if A == 3:
        i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
        keep = i + j <= k
        i, j = i[keep], j[keep]
        return np.column_stack([i, j, k - i - j]) / k
    raise ValueError("simplex grid search supports 2 or 3 actions")


@dataclass
class BellmanBracketResult:
    grid_argmin: np.ndarray
    policy_row: np.ndarray
    grid_min: float
    policy_value: float
    resolution: float

    @property
    def passed(self) -> bool:
        return (self.policy_value <= self.grid_min + 1e-12
                and float(np.max(np.abs(self.grid_argmin - self.policy_row))) <= self.resolution)


def bellman_bracket_grid_check(mdp: FiniteMDP, t: int, x: int, resolution=1e-3) -> BellmanBracketResult:
    """Minimize KL(nu || mu_t(.|x)) + sum_a nu(a) G_t(x, a) over a simplex grid.

    The soft Bellman policy row must do at least as well as every grid point
    and lie within one grid spacing of the grid minimizer.
    """
    V, policy = soft_bellman(mdp)
    mu, G = mdp.passive[t][x], V.q_values[t][x]
    nu = _simplex_grid(mdp.A, resolution)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(nu > 0, nu * (np.log(nu) - np.log(mu)), 0.0)
    values = terms.sum(axis=1) + nu @ G
    row = policy.probs[t][x]
    return BellmanBracketResult(nu[np.argmin(values)], row, float(values.min()),
                                kl_discrete(row, mu) + float(row @ G), resolution)


# --- one-step Gibbs and reward laws -----------------------------------------------------

def reward_gibbs_law(forecast, penalty, lam=1.0):
    """q* proportional to forecast * exp(-lam * penalty); returns ``(law, log Z_r)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    f = forecast.probs if isinstance(forecast, DiscreteDistribution) else np.asarray(forecast, dtype=float)
    with np.errstate(divide="ignore"):
        logw = np.log(f) - lam * np.asarray(penalty, dtype=float)
    log_z = float(logsumexp(logw))
    return DiscreteDistribution(np.exp(logw - log_z)), log_z


def _reward(q, forecast, loglik):
    return -eval_Jt_discrete(q, forecast, loglik)


def rl_one_step_check(forecast, loglik, seed: RandomSeed = RandomSeed(0), samples=200,
                      tol=IDENTITY_TOL) -> IdentityReport:
    """Reward R(q) = -J(q) at the analysis against log Z, plus random competitors.

    ``extra`` holds the largest ``R(q) - log Z`` over ``samples`` random
    admissible laws; it must be negative.
    """
    f = forecast.probs if isinstance(forecast, DiscreteDistribution) else np.asarray(forecast, dtype=float)
    analysis, log_z = reward_gibbs_law(f, -np.asarray(loglik, dtype=float), 1.0)
    lhs = _reward(analysis.probs, f, loglik)
    rng = seed.rng()
    support = f > 0
    worst = -np.inf
    for _ in range(samples):
        q = np.zeros_like(f)
        q[support] = rng.dirichlet(np.ones(support.sum()))
        worst = max(worst, _reward(q, f, loglik) - log_z)
    return IdentityReport("one-step reward supremum", lhs, log_z, evidence=log_z, kl=0.0, tolerance=tol,
                          extra={"max_competitor_gap": float(worst), "samples": samples})


def rl_restricted_family_check(forecast, loglik, statistic, thetas) -> dict:
    """Exponential tilts q_theta proportional to forecast * exp(theta * statistic).

    Returns the indices maximizing the reward and minimizing KL to the
    analysis over ``thetas``.
    """
    f = forecast.probs if isinstance(forecast, DiscreteDistribution) else np.asarray(forecast, dtype=float)
    analysis, _ = reward_gibbs_law(f, -np.asarray(loglik, dtype=float), 1.0)
    stat = np.asarray(statistic, dtype=float)
    rewards, kls = [], []
    for th in thetas:
        q, _ = reward_gibbs_law(f, -th * stat, 1.0)
        rewards.append(_reward(q.probs, f, loglik))
        kls.append(kl_discrete(q, analysis))
    rewards, kls = np.array(rewards), np.array(kls)
    return {"argmax_reward": int(np.argmax(rewards)), "argmin_kl": int(np.argmin(kls)),
            "spread": float(np.ptp(rewards + kls))}
