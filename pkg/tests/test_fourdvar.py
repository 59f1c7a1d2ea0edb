import numpy as np
import pytest

from bayesvar.exact import joint_gaussian_trajectory_posterior, kalman_analysis
from bayesvar.fourdvar import (
    VarCostSpec,
    cost_strong,
    cost_weak,
    grad_fd,
    grad_strong,
    grad_weak_analytic,
    minimize_spec,
    multistart,
    perfect_model_x0_posterior,
    prior_trajectory,
    verify_map_equivalence,
    weak_precision_check,
)
from bayesvar.gaussian import RandomSeed, log_pdf
from bayesvar.instances import random_lgssm
from bayesvar.models import LinearGaussianSSM, NonlinearSSM, ObservationRecord, simulate


def linear_instance(rng, n=2, T=5, seed=0):
    m = random_lgssm(rng, n, 1, T)
    _, obs = simulate(m, RandomSeed(seed))
    return m, obs


def lorenz_instance(T=20, seed=3):
    m = NonlinearSSM(T, 0.01, [1.0, 1.0, 20.0], np.eye(3), np.eye(3), np.eye(3), Q=0.01 * np.eye(3))
    _, obs = simulate(m, RandomSeed(seed))
    return m, obs


def exact_record(model):
    """Noise-free observations of the deterministic run from the background."""
    xs = prior_trajectory(model).reshape(-1, model.n)
    return ObservationRecord(tuple(model.H[t] @ x for t, x in enumerate(xs)))


class TestStrongCost:
    def test_zero_at_perfect_background(self, rng):
        m, _ = linear_instance(rng)
        spec = VarCostSpec("strong", m, exact_record(m))
        assert cost_strong(m.xb, spec) == pytest.approx(0.0, abs=1e-14)

    def test_scalar_single_time(self):
        m = LinearGaussianSSM(0, [0.5], [[2.0]], [], [], [[1.5]], [[0.3]])
        spec = VarCostSpec("strong", m, ObservationRecord(([1.2],)))
        x = 0.9
        expected = 0.5 * (x - 0.5) ** 2 / 2.0 + 0.5 * (1.2 - 1.5 * x) ** 2 / 0.3
        assert cost_strong([x], spec) == pytest.approx(expected, abs=1e-14)
        a, _ = kalman_analysis(m.prior(), m.H[0], m.R[0], [1.2], form="info")
        assert minimize_spec(spec).x[0] == pytest.approx(a.mean[0], abs=1e-10)

    def test_doubling_r_halves_observation_term(self, rng):
        m, obs = linear_instance(rng)
        m2 = LinearGaussianSSM(m.T, m.xb, m.B, m.A, m.Q, m.H, [2 * R for R in m.R])
        x = rng.standard_normal(2)
        s1, s2 = VarCostSpec("strong", m, obs), VarCostSpec("strong", m2, obs)
        d = x - m.xb
        b = 0.5 * d @ np.linalg.solve(m.B, d)
        assert cost_strong(x, s2) - b == pytest.approx(0.5 * (cost_strong(x, s1) - b), rel=1e-13)

    def test_adjoint_gradient_matches_fd(self, rng):
        m, obs = linear_instance(rng)
        spec = VarCostSpec("strong", m, obs)
        for _ in range(20):
            x = 2 * rng.standard_normal(2)
            g = grad_strong(x, spec)
            fd = grad_fd(lambda z: cost_strong(z, spec), x)
            assert np.linalg.norm(g - fd) <= max(1e-6, 1e-4 * np.linalg.norm(g))

    def test_lorenz_adjoint_gradient(self):
        m, obs = lorenz_instance()
        spec = VarCostSpec("strong", m, obs)
        x = m.xb + np.array([0.5, -0.3, 1.0])
        g = grad_strong(x, spec)
        fd = grad_fd(lambda z: cost_strong(z, spec), x)
        assert np.linalg.norm(g - fd) <= max(1e-6, 1e-4 * np.linalg.norm(g))

    def test_flavor_mismatch(self, rng):
        m, obs = linear_instance(rng)
        with pytest.raises(ValueError):
            cost_weak(np.zeros(12), VarCostSpec("strong", m, obs))

    def test_weak_needs_q(self):
        m = NonlinearSSM(2, 0.01, [1.0, 1.0, 1.0], np.eye(3), np.eye(3), np.eye(3))
        with pytest.raises(ValueError):
            VarCostSpec("weak", m, ObservationRecord(tuple([np.zeros(3)] * 3)))

    def test_horizon_mismatch(self, rng):
        m, _ = linear_instance(rng)
        with pytest.raises(ValueError):
            VarCostSpec("strong", m, ObservationRecord(([0.0],)))


class TestWeakCost:
    def test_zero_on_consistent_trajectory(self, rng):
        m, _ = linear_instance(rng)
        spec = VarCostSpec("weak", m, exact_record(m))
        assert cost_weak(prior_trajectory(m), spec) == pytest.approx(0.0, abs=1e-14)

    def test_differences_match_posterior_density(self, rng):
        m, obs = linear_instance(rng)
        spec = VarCostSpec("weak", m, obs)
        post = joint_gaussian_trajectory_posterior(m, obs)
        for _ in range(10):
            a, b = post.mean + rng.standard_normal(12), post.mean + rng.standard_normal(12)
            lhs = cost_weak(a, spec) - cost_weak(b, spec)
            rhs = log_pdf(post, b) - log_pdf(post, a)
            assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_gradient_vanishes_at_posterior_mean(self, rng):
        m, obs = linear_instance(rng)
        spec = VarCostSpec("weak", m, obs)
        mean = joint_gaussian_trajectory_posterior(m, obs).mean
        assert np.linalg.norm(grad_weak_analytic(mean, spec)) < 1e-8

    @pytest.mark.parametrize("kind", ["linear", "lorenz"])
    def test_gradient_matches_fd(self, rng, kind):
        m, obs = linear_instance(rng) if kind == "linear" else lorenz_instance(T=10)
        spec = VarCostSpec("weak", m, obs)
        base = prior_trajectory(m)
        for _ in range(20):
            x = base + rng.standard_normal(base.size)
            g = grad_weak_analytic(x, spec)
            fd = grad_fd(lambda z: cost_weak(z, spec), x)
            assert np.linalg.norm(g - fd) <= max(1e-6, 1e-4 * np.linalg.norm(g))

    def test_gradient_scaling(self, rng):
        m, obs = linear_instance(rng)
        c = 3.0
        scaled = LinearGaussianSSM(m.T, m.xb, m.B, m.A, [c * q for q in m.Q], m.H, [c * r for r in m.R])
        s1, s2 = VarCostSpec("weak", m, obs), VarCostSpec("weak", scaled, obs)
        x = prior_trajectory(m) + rng.standard_normal(12)
        bg = np.zeros(12)
        bg[:2] = np.linalg.solve(m.B, x[:2] - m.xb)
        np.testing.assert_allclose(grad_weak_analytic(x, s2) - bg, (grad_weak_analytic(x, s1) - bg) / c, atol=1e-12)

    def test_hessian_equals_posterior_precision(self, rng):
        m, obs = linear_instance(rng)
        assert weak_precision_check(VarCostSpec("weak", m, obs)) < 1e-6

    def test_small_q_approaches_strong(self, rng):
        m, obs = linear_instance(rng)
        strong = minimize_spec(VarCostSpec("strong", m, obs)).x
        induced = [strong]
        for t in range(m.T):
            induced.append(m.A[t] @ induced[-1])
        induced = np.concatenate(induced)
        gaps = []
        for q in (1e-2, 1e-4, 1e-6):
            mq = LinearGaussianSSM(m.T, m.xb, m.B, m.A, q * np.eye(2), m.H, m.R)
            weak = joint_gaussian_trajectory_posterior(mq, obs).mean
            gaps.append(np.max(np.abs(weak - induced)))
        assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-4


class TestMapEquivalence:
    def test_scalar_single_time(self):
        m = LinearGaussianSSM(0, [0.0], [[1.0]], [], [], [[1.0]], [[1.0]])
        obs = ObservationRecord(([2.0],))
        for flavor in ("strong", "weak"):
            rep = verify_map_equivalence(VarCostSpec(flavor, m, obs))
            assert rep.passed and rep.extra["oracle"][0] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("flavor", ["strong", "weak"])
    def test_random_instance(self, rng, flavor):
        m, obs = linear_instance(rng)
        rep = verify_map_equivalence(VarCostSpec(flavor, m, obs))
        assert rep.passed and rep.lhs < 1e-6

    def test_strong_oracle_matches_small_q_limit(self, rng):
        m, obs = linear_instance(rng)
        mq = LinearGaussianSSM(m.T, m.xb, m.B, m.A, 1e-9 * np.eye(2), m.H, m.R)
        x0 = joint_gaussian_trajectory_posterior(mq, obs).mean[:2]
        np.testing.assert_allclose(perfect_model_x0_posterior(m, obs).mean, x0, atol=1e-6)

    def test_rejects_nonlinear(self):
        m, obs = lorenz_instance(T=3)
        with pytest.raises(TypeError):
            verify_map_equivalence(VarCostSpec("strong", m, obs))


class TestLorenzWindow:
    def test_strong_window_converges(self):
        m, obs = lorenz_instance()
        spec = VarCostSpec("strong", m, obs)
        res = minimize_spec(spec, init=m.xb + np.array([1.0, -1.0, 2.0]))
        assert res.converged and res.grad_norm < 1e-6
        assert res.cost < res.costs[0]

    def test_multistart_deterministic_and_clustered(self):
        m, obs = lorenz_instance(T=10)
        spec = VarCostSpec("strong", m, obs)
        a = multistart(spec, 6, RandomSeed(1), spread=2.0)
        b = multistart(spec, 6, RandomSeed(1), spread=2.0, workers=1)
        assert [x.cost for x in a.minima] == [x.cost for x in b.minima]
        assert sum(x.count for x in a.minima) == sum(r.converged for r in a.results)
        costs = [x.cost for x in a.minima]
        assert all(c2 - c1 > 1e-6 for c1, c2 in zip(costs, costs[1:]))

    def test_multistart_needs_a_start(self, rng):
        m, obs = linear_instance(rng)
        with pytest.raises(ValueError):
            multistart(VarCostSpec("strong", m, obs), 0, RandomSeed(0))


def test_optim_result_serializes(rng):
    m, obs = linear_instance(rng)
    d = minimize_spec(VarCostSpec("weak", m, obs)).to_dict()
    assert d["converged"] and len(d["argmin"]) == 12
