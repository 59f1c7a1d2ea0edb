"""Exact Bayesian reference answers.

Forward filtering for discrete HMMs, brute-force path enumeration, the Kalman
update in information and gain form, and the joint Gaussian trajectory
posterior assembled from the weak-constraint quadratic form. Everything here
is an oracle for the variational, 4D-Var and ensemble modules.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve
from scipy.special import logsumexp

from .gaussian import Gaussian, NotPositiveDefiniteError, cholesky, log_pdf, symmetrize
from .gaussian import woodbury_posterior_cov
from .models import DiscreteHMM, LinearGaussianSSM, ObservationRecord

__all__ = [
    "DiscreteDistribution",
    "EvidenceError",
    "FilterOutput",
    "enumerate_paths",
    "hmm_forward",
    "hmm_path_posterior_enumerate",
    "joint_gaussian_trajectory_posterior",
    "joint_observation_law",
    "kalman_analysis",
    "kalman_filter_run",
    "kalman_gain",
    "kalman_predict",
    "path_loglik",
    "path_marginal",
    "prior_path_logprob",
    "stacked_observation_operator",
    "trajectory_normal_equations",
]

ENUMERATION_LIMIT = 10**6
TRAJECTORY_DIM_LIMIT = 200


class EvidenceError(ValueError):
    """Raised when an analysis step annihilates all probability mass (Z_t = 0)."""


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Probability vector over a finite set (states, or flattened paths)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to one")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def size(self) -> int:
        return self.probs.size

    @classmethod
    def from_weights(cls, w) -> "DiscreteDistribution":
        w = np.asarray(w, dtype=float)
        return cls(w / w.sum())

    @classmethod
    def from_logweights(cls, logw) -> "DiscreteDistribution":
        logw = np.asarray(logw, dtype=float)
        return cls(np.exp(logw - logsumexp(logw)))

    def support(self) -> np.ndarray:
        return self.probs > 0

    def mean(self, values) -> float:
        return float(self.probs @ np.asarray(values, dtype=float))


@dataclass
class FilterOutput:
    """Per-time forecast and analysis laws with log-evidence increments."""

    forecasts: list
    analyses: list
    log_evidence_increments: np.ndarray

    @property
    def log_evidence(self) -> float:
        return float(np.sum(self.log_evidence_increments))

    def to_dict(self) -> dict:
        def law(x):
            if isinstance(x, Gaussian):
                return {"mean": x.mean.tolist(), "cov": x.cov.tolist()}
            return {"probs": x.probs.tolist()}

        return {
            "forecasts": [law(x) for x in self.forecasts],
            "analyses": [law(x) for x in self.analyses],
            "log_evidence_increments": np.asarray(self.log_evidence_increments).tolist(),
            "log_evidence": self.log_evidence,
        }


# --- discrete track -------------------------------------------------------

def hmm_forward(model: DiscreteHMM) -> FilterOutput:
    """Forecast-analysis recursion for a discrete HMM, normalized at every step."""
    forecasts, analyses, logz = [], [], []
    forecast = model.initial
    for t in range(model.T + 1):
        if t > 0:
            forecast = analyses[-1].probs @ model.transitions[t - 1]
            forecast = forecast / forecast.sum()
        loglik = model.logliks[t]
        with np.errstate(divide="ignore"):
            logw = np.log(forecast) + loglik
        if not np.any(np.isfinite(logw)):
            raise EvidenceError(f"analysis at t={t} has zero evidence (Z_t = 0)")
        lz = logsumexp(logw)
        forecasts.append(DiscreteDistribution(forecast))
        analyses.append(DiscreteDistribution(np.exp(logw - lz)))
        logz.append(lz)
    return FilterOutput(forecasts, analyses, np.array(logz))


def enumerate_paths(S: int, T: int) -> np.ndarray:
    """All S^(T+1) state paths as rows of an integer array, lexicographic order."""
    count = S ** (T + 1)
    if count > ENUMERATION_LIMIT:
        raise ValueError(f"{count} paths exceeds the enumeration limit {ENUMERATION_LIMIT}")
    return np.array(list(itertools.product(range(S), repeat=T + 1)), dtype=int).reshape(count, T + 1)


def prior_path_logprob(model: DiscreteHMM, paths: np.ndarray) -> np.ndarray:
    """log p(x_{0:T}) for each enumerated path (``-inf`` off-support)."""
    with np.errstate(divide="ignore"):
        lp = np.log(model.initial)[paths[:, 0]]
        for t in range(model.T):
            lp = lp + np.log(model.transitions[t])[paths[:, t], paths[:, t + 1]]
    return lp


def path_loglik(model: DiscreteHMM, paths: np.ndarray) -> np.ndarray:
    """Sum over t of log p(y_t | x_t) along each path."""
    return sum(model.logliks[t][paths[:, t]] for t in range(model.T + 1))


def hmm_path_posterior_enumerate(model: DiscreteHMM):
    """Smoothing posterior over all paths by explicit enumeration.

    Returns ``(paths, posterior, log_evidence)`` where ``posterior`` is a
    :class:`DiscreteDistribution` aligned with the rows of ``paths``.
    """
    paths = enumerate_paths(model.S, model.T)
    logw = prior_path_logprob(model, paths) + path_loglik(model, paths)
    if not np.any(np.isfinite(logw)):
        raise EvidenceError("observation sequence has zero evidence")
    logz = float(logsumexp(logw))
    return paths, DiscreteDistribution(np.exp(logw - logz)), logz


def path_marginal(paths, law: DiscreteDistribution, t: int, S: int) -> np.ndarray:
    return np.bincount(paths[:, t], weights=law.probs, minlength=S)


# --- linear-Gaussian track ------------------------------------------------

def kalman_gain(Pf, H, R) -> np.ndarray:
    """K = Pf H^T (H Pf H^T + R)^-1, defined for singular PSD ``Pf`` as long as R is PD."""
    Pf = np.atleast_2d(Pf)
    R = np.atleast_2d(R)
    H = np.asarray(H, dtype=float).reshape(R.shape[0], Pf.shape[0])
    S = symmetrize(H @ Pf @ H.T + R)
    try:
        c = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("innovation covariance is not positive definite") from exc
    return cho_solve(c, H @ Pf.T).T


def _analysis_info(forecast: Gaussian, H, R, y):
    Pf_inv = forecast.precision()
    R_fac = cho_factor(R, lower=True)
    RinvH = cho_solve(R_fac, H)
    Pa_inv = symmetrize(Pf_inv + H.T @ RinvH)
    L = cholesky(Pa_inv, "posterior precision")
    rhs = Pf_inv @ forecast.mean + H.T @ cho_solve(R_fac, y)
    ma = cho_solve((L, True), rhs)
    Pa = cho_solve((L, True), np.eye(forecast.dim))
    return ma, Pa


def _analysis_gain(forecast: Gaussian, H, R, y):
    K = kalman_gain(forecast.cov, H, R)
    ma = forecast.mean + K @ (y - H @ forecast.mean)
    Pa = (np.eye(forecast.dim) - K @ H) @ forecast.cov
    return ma, Pa


def kalman_analysis(forecast: Gaussian, H, R, y, form: str = "gain"):
    """Exact Gaussian analysis step.

    Args:
        forecast: forecast law N(m_f, P_f).
        H, R: observation operator and observation-error covariance.
        y: realized observation.
        form: ``"info"`` for the precision-form update, ``"gain"`` for the
            Kalman-gain form, ``"woodbury"`` to take the covariance from
            :func:`woodbury_posterior_cov`.

    Returns:
        ``(analysis, log_z)`` with log_z = log N(y; H m_f, H P_f H^T + R).
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    H = np.asarray(H, dtype=float).reshape(R.shape[0], forecast.dim)
    if y.shape != (R.shape[0],):
        raise ValueError(f"observation has shape {y.shape}, expected {(R.shape[0],)}")
    cholesky(R, "observation-error covariance")
    S = H @ forecast.cov @ H.T + R
    innovation_law = Gaussian(H @ forecast.mean, S)
    log_z = log_pdf(innovation_law, y)
    if form == "info":
        ma, Pa = _analysis_info(forecast, H, R, y)
    elif form == "gain":
        ma, Pa = _analysis_gain(forecast, H, R, y)
    elif form == "woodbury":
        ma, _ = _analysis_gain(forecast, H, R, y)
        Pa = woodbury_posterior_cov(forecast.cov, H, R)
    else:
        raise ValueError(f"unknown analysis form {form!r}")
    return Gaussian(ma, Pa), log_z


def kalman_predict(analysis: Gaussian, A, Q) -> Gaussian:
    A = np.atleast_2d(A)
    return Gaussian(A @ analysis.mean, A @ analysis.cov @ A.T + Q)


def kalman_filter_run(model: LinearGaussianSSM, obs: ObservationRecord, form: str = "gain") -> FilterOutput:
    """Kalman filter over the whole window, accumulating the log-evidence."""
    if obs.horizon != model.T:
        raise ValueError(f"record has horizon {obs.horizon}, model has {model.T}")
    forecasts, analyses, logz = [], [], []
    forecast = model.prior()
    for t in range(model.T + 1):
        if t > 0:
            forecast = kalman_predict(analyses[-1], model.A[t - 1], model.Q[t - 1])
        analysis, lz = kalman_analysis(forecast, model.H[t], model.R[t], obs.y[t], form=form)
        forecasts.append(forecast)
        analyses.append(analysis)
        logz.append(lz)
    return FilterOutput(forecasts, analyses, np.array(logz))


def _state_transition_products(model: LinearGaussianSSM):
    """Phi_t = A_{t-1} ... A_0, with Phi_0 = I."""
    phis = [np.eye(model.n)]
    for t in range(model.T):
        phis.append(model.A[t] @ phis[-1])
    return phis


def stacked_observation_operator(model: LinearGaussianSSM) -> np.ndarray:
    """G with rows H_t Phi_t, mapping x_0 to the noise-free observations under a perfect model."""
    return np.vstack([H @ phi for H, phi in zip(model.H, _state_transition_products(model))])


def joint_observation_law(model: LinearGaussianSSM) -> Gaussian:
    """Law of the stacked observations y_{0:T} under the full linear-Gaussian model.

    Built from the explicit state covariance Cov(x_s, x_t), independent of any
    recursion.
    """
    n, T = model.n, model.T
    phis = _state_transition_products(model)
    # x_t = Phi_t x_0 + sum_{k<t} Phi_{k+1 -> t} xi_k
    def transfer(k, t):  # maps x_k to x_t
        out = np.eye(n)
        for j in range(k, t):
            out = model.A[j] @ out
        return out

    means = [phi @ model.xb for phi in phis]
    C = [[None] * (T + 1) for _ in range(T + 1)]
    for s in range(T + 1):
        for t in range(T + 1):
            c = phis[s] @ model.B @ phis[t].T
            for k in range(min(s, t)):
                c = c + transfer(k + 1, s) @ model.Q[k] @ transfer(k + 1, t).T
            C[s][t] = c
    Hblk = block_diag(*model.H)
    X = np.block(C)
    mean = Hblk @ np.concatenate(means)
    cov = Hblk @ X @ Hblk.T + block_diag(*model.R)
    return Gaussian(mean, cov)


def trajectory_normal_equations(model: LinearGaussianSSM, obs: ObservationRecord):
    """Precision matrix and linear term of the weak-constraint quadratic form.

    The precision is block tridiagonal with background, model-error and
    observation contributions; the posterior mean solves ``prec @ x = lin``.
    """
    n, T = model.n, model.T
    N = n * (T + 1)
    if N > TRAJECTORY_DIM_LIMIT:
        raise ValueError(f"trajectory dimension {N} exceeds limit {TRAJECTORY_DIM_LIMIT}")
    if obs.horizon != T:
        raise ValueError(f"record has horizon {obs.horizon}, model has {T}")
    prec = np.zeros((N, N))
    lin = np.zeros(N)
    blk = lambda t: slice(t * n, (t + 1) * n)  # noqa: E731

    Binv = cho_solve(cho_factor(model.B, lower=True), np.eye(n))
    prec[blk(0), blk(0)] += Binv
    lin[blk(0)] += Binv @ model.xb
    for t in range(T):
        A = model.A[t]
        Qinv = cho_solve(cho_factor(model.Q[t], lower=True), np.eye(n))
        prec[blk(t), blk(t)] += A.T @ Qinv @ A
        prec[blk(t + 1), blk(t + 1)] += Qinv
        prec[blk(t), blk(t + 1)] -= A.T @ Qinv
        prec[blk(t + 1), blk(t)] -= Qinv @ A
    for t in range(T + 1):
        H = model.H[t]
        RinvH = cho_solve(cho_factor(model.R[t], lower=True), H)
        prec[blk(t), blk(t)] += H.T @ RinvH
        lin[blk(t)] += RinvH.T @ obs.y[t]
    return symmetrize(prec), lin


def joint_gaussian_trajectory_posterior(model: LinearGaussianSSM, obs: ObservationRecord) -> Gaussian:
    """Gaussian posterior over the stacked trajectory (x_0, ..., x_T).

    Mean solves the normal equations of the weak-constraint cost, so it is
    both the MAP trajectory and the posterior mean.
    """
    prec, lin = trajectory_normal_equations(model, obs)
    try:
        L = cholesky(prec, "trajectory posterior precision")
    except NotPositiveDefiniteError as exc:
        raise ValueError("trajectory posterior precision is singular") from exc
    N = lin.size
    return Gaussian(cho_solve((L, True), lin), cho_solve((L, True), np.eye(N)))
