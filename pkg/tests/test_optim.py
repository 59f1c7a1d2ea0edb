import numpy as np
import pytest

from bayesvar.instances import random_spd
from bayesvar.optim import OptimSettings, grad_fd, minimize


def quadratic(A, b):
    return (lambda x: 0.5 * x @ A @ x - b @ x), (lambda x: A @ x - b)


class TestMinimize:
    @pytest.mark.parametrize("n", [1, 3, 6, 10])
    def test_quadratic_converges_quickly(self, rng, n):
        A, b = random_spd(rng, n), rng.standard_normal(n)
        f, g = quadratic(A, b)
        res = minimize(f, g, np.zeros(n))
        assert res.converged and res.iterations <= n + 5
        np.testing.assert_allclose(res.x, np.linalg.solve(A, b), rtol=1e-7, atol=1e-9)

    def test_start_at_minimum(self, rng):
        A, b = random_spd(rng, 3), rng.standard_normal(3)
        f, g = quadratic(A, b)
        res = minimize(f, g, np.linalg.solve(A, b))
        assert res.converged and res.iterations == 0

    def test_rosenbrock(self):
        f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
        g = lambda x: np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
        res = minimize(f, g, [-1.2, 1.0])
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)

    def test_costs_nonincreasing_up_to_roundoff(self, rng):
        A, b = random_spd(rng, 5, scale=100.0), rng.standard_normal(5)
        f, g = quadratic(A, b)
        settings = OptimSettings()
        costs = minimize(f, g, rng.standard_normal(5), settings).costs
        for a, c in zip(costs, costs[1:]):
            assert c <= a + settings.cost_noise * (abs(a) + 1)

    def test_iteration_cap_reports_failure(self):
        f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
        g = lambda x: np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
        res = minimize(f, g, [-1.2, 1.0], OptimSettings(max_iter=3))
        assert not res.converged and res.iterations == 3 and res.message

    def test_nonfinite_start_rejected(self):
        with pytest.raises(ValueError):
            minimize(lambda x: np.inf, lambda x: x, [1.0])

    def test_cost_barrier_is_respected(self):
        # cost is infinite outside x > 0; optimum at x = 1
        f = lambda x: x[0] - np.log(x[0]) if x[0] > 0 else np.inf
        g = lambda x: np.array([1 - 1 / x[0]])
        res = minimize(f, g, [20.0])
        assert res.converged and res.x[0] == pytest.approx(1.0, abs=1e-8)


class TestGradFD:
    def test_constant_cost(self):
        np.testing.assert_array_equal(grad_fd(lambda x: 3.0, np.ones(4)), np.zeros(4))

    def test_relative_accuracy(self, rng):
        A = random_spd(rng, 4)
        f = lambda x: np.sin(x).sum() + 0.5 * x @ A @ x
        x = rng.standard_normal(4)
        exact = np.cos(x) + A @ x
        assert np.linalg.norm(grad_fd(f, x) - exact) / np.linalg.norm(exact) < 1e-8

    def test_second_order_convergence(self):
        f = lambda x: np.exp(x[0]) * np.sin(2 * x[1])
        x = np.array([0.3, 0.7])
        exact = np.array([np.exp(0.3) * np.sin(1.4), 2 * np.exp(0.3) * np.cos(1.4)])
        e1 = np.linalg.norm(grad_fd(f, x, h=1e-2) - exact)
        e2 = np.linalg.norm(grad_fd(f, x, h=5e-3) - exact)
        assert e1 / e2 == pytest.approx(4.0, rel=0.05)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            grad_fd(lambda x: 0.0, [1.0], h=0.0)
