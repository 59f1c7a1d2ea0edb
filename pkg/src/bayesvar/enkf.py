"""Ensemble Kalman analysis steps and finite-ensemble convergence experiments.

Members are stored as rows of an (N, n) array. The sample covariance uses
1/(N-1). Two analysis steps are provided: the perturbed-observation update,
which is random, and a deterministic symmetric square-root transform that
reproduces the surrogate analysis mean and covariance exactly at every N.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .exact import kalman_analysis, kalman_filter_run, kalman_gain
from .gaussian import Gaussian, RandomSeed, cholesky, sample, symmetrize
from .models import LinearGaussianSSM, ObservationRecord

__all__ = [
    "ConvergenceRow",
    "ConvergenceTable",
    "Ensemble",
    "EnsembleRun",
    "enkf_convergence_experiment",
    "ensemble_moments",
    "exact_transport_experiment",
    "normality_zscores",
    "perturbed_obs_step",
    "run_enkf",
    "square_root_step",
    "surrogate_analysis_moments",
    "surrogate_gain",
    "transport_draw",
]


@dataclass(frozen=True, eq=False)
class Ensemble:
    members: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.members, dtype=float))
        if X.shape[0] < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {X.shape[0]}")
        X.setflags(write=False)
        object.__setattr__(self, "members", X)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    @classmethod
    def draw(cls, law: Gaussian, N: int, seed: RandomSeed) -> "Ensemble":
        return cls(sample(law, seed, N))


def ensemble_moments(e: Ensemble):
    """Sample mean and 1/(N-1) sample covariance."""
    m = e.members.mean(axis=0)
    A = e.members - m
    return m, symmetrize(A.T @ A / (e.size - 1))


def surrogate_gain(Pf_hat, H, R) -> np.ndarray:
    """P H^T (H P H^T + R)^-1; well defined for singular P as long as R is PD."""
    cholesky(np.atleast_2d(R), "observation-error covariance")
    return kalman_gain(Pf_hat, H, R)


def surrogate_analysis_moments(e: Ensemble, H, R, y):
    """Analysis mean and covariance obtained by applying the Kalman update to the sample moments."""
    m, P = ensemble_moments(e)
    K = surrogate_gain(P, H, R)
    H = np.asarray(H, dtype=float).reshape(-1, e.dim)
    return m + K @ (np.atleast_1d(y) - H @ m), symmetrize(P - K @ H @ P)


def perturbed_obs_step(e: Ensemble, H, R, y, seed: RandomSeed, gain=None) -> Ensemble:
    """x_i + K (y + eps_i - H x_i) with eps_i ~ N(0, R) drawn from ``seed``.

    ``gain`` defaults to the surrogate gain of the input ensemble; passing the
    exact Kalman gain gives the exact-transport configuration.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    H = np.asarray(H, dtype=float).reshape(R.shape[0], e.dim)
    Lr = cholesky(R, "observation-error covariance")
    K = surrogate_gain(ensemble_moments(e)[1], H, R) if gain is None else np.asarray(gain, dtype=float)
    eps = seed.rng().standard_normal((e.size, R.shape[0])) @ Lr.T
    innov = np.atleast_1d(y)[None, :] + eps - e.members @ H.T
    return Ensemble(e.members + innov @ K.T)


def square_root_step(e: Ensemble, H, R, y) -> Ensemble:
    """Deterministic symmetric square-root analysis.

    With anomalies A (rows) and S = H A^T / sqrt(N-1), the anomalies are
    right-multiplied by T = (I + S^T R^-1 S)^(-1/2), computed from a thin SVD
    of the whitened S. The output sample covariance is then P - K H P exactly,
    and T fixes the vector of ones so the mean moves by K (y - H m) only.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    H = np.asarray(H, dtype=float).reshape(R.shape[0], e.dim)
    N = e.size
    m, P = ensemble_moments(e)
    A = e.members - m
    Lr = cholesky(R, "observation-error covariance")
    S = solve_triangular(Lr, H @ A.T, lower=True) / np.sqrt(N - 1)
    _, sv, Wt = np.linalg.svd(S, full_matrices=False)
    scale = 1.0 / np.sqrt(1.0 + sv ** 2) - 1.0
    # T = I + W diag(scale) W^T, applied without forming the N x N matrix
    TA = A + Wt.T @ (scale[:, None] * (Wt @ A))
    if not np.all(np.isfinite(TA)):
        raise np.linalg.LinAlgError("ensemble transform square root failed")
    K = surrogate_gain(P, H, R)
    mean = m + K @ (np.atleast_1d(y) - H @ m)
    return Ensemble(mean + TA)


# --- tables ------------------------------------------------------------------

@dataclass
class ConvergenceRow:
    N: int
    seeds: int
    time: int
    mean_error: float
    cov_error: float


@dataclass
class ConvergenceTable:
    rows: list
    slope_mean: float
    slope_cov: float
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        """One row per (N, time); the fitted slopes are repeated on every row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "seed_count", "time", "mean_error", "cov_error", "slope_mean", "slope_cov"])
        slopes = [repr(self.slope_mean), repr(self.slope_cov)]
        for r in self.rows:
            w.writerow([r.N, r.seeds, r.time, repr(r.mean_error), repr(r.cov_error), *slopes])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"rows": [vars(r) for r in self.rows], "slope_mean": self.slope_mean,
                "slope_cov": self.slope_cov, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


def _slope(Ns, errors) -> float:
    if len(Ns) < 2:
        return float("nan")
    return float(np.polyfit(np.log(Ns), np.log(errors), 1)[0])


def _cells(Ns, n_seeds):
    return [(N, k) for N in Ns for k in range(n_seeds)]


def _parallel(fn, cells, workers):
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


# --- exact transport ---------------------------------------------------------

def transport_draw(forecast: Gaussian, H, R, y, N: int, seed: RandomSeed) -> Ensemble:
    """i.i.d. exact forecast draws pushed through the perturbed update with the exact gain."""
    K = kalman_gain(forecast.cov, H, R)
    e = Ensemble.draw(forecast, N, seed.child(0))
    return perturbed_obs_step(e, H, R, y, seed.child(1), gain=K)


def exact_transport_experiment(forecast: Gaussian, H, R, y, Ns, seed: RandomSeed, n_seeds=20,
                               workers=None) -> ConvergenceTable:
    """Seed-averaged moment errors of exactly transported ensembles against the analysis law."""
    analysis, _ = kalman_analysis(forecast, H, R, y)

    def cell(c):
        N, k = c
        m, P = ensemble_moments(transport_draw(forecast, H, R, y, N, seed.child(N, k)))
        return np.linalg.norm(m - analysis.mean), np.linalg.norm(P - analysis.cov)

    errs = np.array(_parallel(cell, _cells(Ns, n_seeds), workers)).reshape(len(Ns), n_seeds, 2).mean(axis=1)
    rows = [ConvergenceRow(int(N), n_seeds, 0, float(me), float(ce)) for N, (me, ce) in zip(Ns, errs)]
    return ConvergenceTable(rows, _slope(Ns, errs[:, 0]), _slope(Ns, errs[:, 1]))


def normality_zscores(samples, mean, cov):
    """Skewness and excess-kurtosis z-scores per coordinate of whitened samples.

    Samples are whitened with the exact law, so under normality mean(z^3) has
    variance 15/N and mean(z^4) - 3 has variance 96/N.
    """
    X = np.atleast_2d(samples)
    L = np.linalg.cholesky(cov)
    z = solve_triangular(L, (X - mean).T, lower=True).T
    N = X.shape[0]
    return (z ** 3).mean(axis=0) / np.sqrt(15 / N), ((z ** 4).mean(axis=0) - 3) / np.sqrt(96 / N)


# --- filtering runs -------------------------------------------------------------

@dataclass
class EnsembleRun:
    analyses: list
    # largest deviation of each square-root step from its surrogate moments
    moment_residuals: list


def _propagate(model, t, X):
    if isinstance(model, LinearGaussianSSM):
        return X @ model.A[t].T
    return np.array([model.step(t, x) for x in X])


def run_enkf(model, obs: ObservationRecord, N: int, seed: RandomSeed, variant="perturbed") -> EnsembleRun:
    """Cycle forecast and analysis over the window starting from N(xb, B) draws.

    Model error, when the model has ``Q``, is added to each forecast member.
    """
    if variant not in ("perturbed", "sqrt"):
        raise ValueError(f"unknown variant {variant!r}")
    e = Ensemble.draw(model.prior(), N, seed.child(0))
    analyses, residuals = [], []
    Q = getattr(model, "Q", None)
    for t in range(model.T + 1):
        if t > 0:
            X = _propagate(model, t - 1, e.members)
            if Q is not None:
                X = X + seed.rng(1, t).standard_normal(X.shape) @ np.linalg.cholesky(Q[t - 1]).T
            e = Ensemble(X)
        H, R, y = model.H[t], model.R[t], obs.y[t]
        if variant == "perturbed":
            e = perturbed_obs_step(e, H, R, y, seed.child(2, t))
        else:
            target_m, target_P = surrogate_analysis_moments(e, H, R, y)
            e = square_root_step(e, H, R, y)
            m, P = ensemble_moments(e)
            residuals.append(max(np.max(np.abs(m - target_m)), np.max(np.abs(P - target_P))))
        analyses.append(e)
    return EnsembleRun(analyses, residuals)


def enkf_convergence_experiment(model: LinearGaussianSSM, obs: ObservationRecord, Ns, seed: RandomSeed,
                                n_seeds=20, variant="perturbed", workers=None) -> ConvergenceTable:
    """Per-time moment errors of the EnKF against the exact Kalman analyses.

    Errors are averaged over seeds; the slopes are fitted to the time-averaged
    errors against N.
    """
    exact = kalman_filter_run(model, obs).analyses
    T = model.T

    def cell(c):
        N, k = c
        run = run_enkf(model, obs, N, seed.child(N, k), variant)
        out = np.empty((T + 1, 2))
        for t, e in enumerate(run.analyses):
            m, P = ensemble_moments(e)
            out[t] = np.linalg.norm(m - exact[t].mean), np.linalg.norm(P - exact[t].cov)
        return out, max(run.moment_residuals, default=0.0)

    results = _parallel(cell, _cells(Ns, n_seeds), workers)
    errs = np.array([r[0] for r in results]).reshape(len(Ns), n_seeds, T + 1, 2).mean(axis=1)
    rows = [ConvergenceRow(int(N), n_seeds, t, float(errs[i, t, 0]), float(errs[i, t, 1]))
            for i, N in enumerate(Ns) for t in range(T + 1)]
    avg = errs.mean(axis=1)
    extra = {"variant": variant}
    if variant == "sqrt":
        extra["max_moment_residual"] = float(max(r[1] for r in results))
    return ConvergenceTable(rows, _slope(Ns, avg[:, 0]), _slope(Ns, avg[:, 1]), extra)
