"""Dense Gaussian laws, seeded randomness, and covariance update identities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

__all__ = [
    "Gaussian",
    "NotPositiveDefiniteError",
    "RandomSeed",
    "cholesky",
    "joseph_form_cov",
    "kl_gaussian",
    "log_pdf",
    "sample",
    "symmetrize",
    "woodbury_posterior_cov",
]

_LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix that must be positive definite fails Cholesky."""


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def cholesky(a, name="matrix"):
    """Lower Cholesky factor of ``a``; failure is a hard error (no jitter)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefiniteError(f"{name} has non-finite entries")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"{name} is not positive definite") from exc


@dataclass(frozen=True)
class RandomSeed:
    """A (seed, stream) pair that fully determines a random stream.

    Draws come from numpy's PCG64 seeded through ``SeedSequence`` with the
    stream id as spawn key, so distinct streams are statistically independent
    and identical pairs reproduce identical draws on every platform.
    """

    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            value = getattr(self, name)
            if not 0 <= int(value) < 2**64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")

    def rng(self, *keys: int) -> np.random.Generator:
        """Generator for this stream; extra ``keys`` select independent substreams."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream), *map(int, keys)))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "RandomSeed":
        """A new stream id derived deterministically from this one and ``keys``."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream), *map(int, keys)))
        return RandomSeed(self.seed, int(ss.generate_state(1, dtype=np.uint64)[0]))


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Multivariate normal law N(mean, cov) with a cached Cholesky factor.

    The covariance is symmetrized on construction and must admit a Cholesky
    factorization; near-singular input raises rather than being regularized.
    """

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = symmetrize(np.atleast_2d(self.cov))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean dimension {mean.size}")
        chol = cholesky(cov, "covariance")
        for arr in (mean, cov, chol):
            arr.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def precision(self) -> np.ndarray:
        return cho_solve((self.chol, True), np.eye(self.dim))

    def marginal(self, idx) -> "Gaussian":
        idx = np.asarray(idx)
        return Gaussian(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def __repr__(self):
        return f"Gaussian(dim={self.dim}, mean={np.array2string(self.mean, precision=4)})"


def log_pdf(g: Gaussian, x) -> float:
    """log N(x; mean, cov) in nats."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != g.mean.shape:
        raise ValueError(f"point of shape {x.shape} does not match Gaussian of dimension {g.dim}")
    z = solve_triangular(g.chol, x - g.mean, lower=True)
    return float(-0.5 * (g.dim * _LOG_2PI + g.logdet() + z @ z))


def kl_gaussian(q: Gaussian, p: Gaussian) -> float:
    """KL(q || p) between two Gaussians, in nats."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    n = q.dim
    # tr(P_p^-1 P_q) = ||L_p^-1 L_q||_F^2
    m = solve_triangular(p.chol, q.chol, lower=True)
    d = solve_triangular(p.chol, q.mean - p.mean, lower=True)
    kl = 0.5 * (np.sum(m * m) + d @ d - n + p.logdet() - q.logdet())
    return float(max(kl, 0.0))


def sample(g: Gaussian, seed: RandomSeed, count: int) -> np.ndarray:
    """``count`` i.i.d. draws from ``g`` as a (count, n) array."""
    if count < 1:
        raise ValueError("count must be positive")
    z = seed.rng().standard_normal((count, g.dim))
    return g.mean + z @ g.chol.T


def _check_update_shapes(Pf, H, R):
    Pf = np.atleast_2d(np.asarray(Pf, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    H = np.asarray(H, dtype=float).reshape(R.shape[0], Pf.shape[0])
    return Pf, H, R


def woodbury_posterior_cov(Pf, H, R) -> np.ndarray:
    """Posterior covariance Pf - Pf H^T (H Pf H^T + R)^-1 H Pf.

    Algebraically equal to (Pf^-1 + H^T R^-1 H)^-1 but never inverts Pf.
    """
    Pf, H, R = _check_update_shapes(Pf, H, R)
    cholesky(Pf, "forecast covariance")
    cholesky(R, "observation-error covariance")
    PHt = Pf @ H.T
    S = symmetrize(H @ PHt + R)
    c = cho_factor(S, lower=True)
    Pa = symmetrize(Pf - PHt @ cho_solve(c, PHt.T))
    cholesky(Pa, "posterior covariance")
    return Pa


def joseph_form_cov(Pf, H, R, K) -> np.ndarray:
    """Joseph-form covariance (I - KH) Pf (I - KH)^T + K R K^T.

    Positive semidefinite for any gain ``K``; equals (I - KH) Pf when ``K`` is
    the optimal gain.
    """
    Pf, H, R = _check_update_shapes(Pf, H, R)
    K = np.asarray(K, dtype=float)
    n, m = Pf.shape[0], R.shape[0]
    if K.shape != (n, m):
        raise ValueError(f"gain has shape {K.shape}, expected {(n, m)}")
    cholesky(Pf, "forecast covariance")
    cholesky(R, "observation-error covariance")
    IKH = np.eye(n) - K @ H
    return symmetrize(IKH @ Pf @ IKH.T + K @ R @ K.T)
