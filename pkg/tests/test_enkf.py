import json

import numpy as np
import pytest

from bayesvar.enkf import (
    Ensemble,
    enkf_convergence_experiment,
    ensemble_moments,
    exact_transport_experiment,
    normality_zscores,
    perturbed_obs_step,
    run_enkf,
    square_root_step,
    surrogate_analysis_moments,
    surrogate_gain,
    transport_draw,
)
from bayesvar.exact import kalman_analysis
from bayesvar.gaussian import Gaussian, NotPositiveDefiniteError, RandomSeed
from bayesvar.instances import random_lgssm, random_spd
from bayesvar.models import NonlinearSSM, simulate

FORECAST = Gaussian([0.5, -1.0], [[1.0, 0.3], [0.3, 0.5]])
H = np.array([[1.0, 0.5]])
R = np.array([[0.4]])
Y = np.array([1.0])


class TestMoments:
    def test_identical_members(self):
        m, P = ensemble_moments(Ensemble(np.tile([1.0, 2.0], (5, 1))))
        np.testing.assert_array_equal(P, np.zeros((2, 2)))
        np.testing.assert_array_equal(m, [1.0, 2.0])

    def test_two_member_hand_value(self):
        m, P = ensemble_moments(Ensemble([[0.0], [2.0]]))
        assert m[0] == 1.0 and P[0, 0] == 2.0

    def test_large_sample(self):
        e = Ensemble.draw(FORECAST, 10_000, RandomSeed(4))
        m, P = ensemble_moments(e)
        assert np.all(np.abs(m - FORECAST.mean) < 4 * np.sqrt(np.diag(FORECAST.cov) / 10_000))
        np.testing.assert_allclose(P, FORECAST.cov, atol=0.05)

    def test_needs_two_members(self):
        with pytest.raises(ValueError):
            Ensemble([[1.0, 2.0]])


class TestGain:
    def test_zero_spread(self):
        np.testing.assert_array_equal(surrogate_gain(np.zeros((2, 2)), H, R), np.zeros((2, 1)))

    def test_exact_moments_give_kalman_gain(self, rng):
        for _ in range(20):
            P = random_spd(rng, 3)
            Hm, Rm = rng.standard_normal((2, 3)), random_spd(rng, 2)
            expected = P @ Hm.T @ np.linalg.inv(Hm @ P @ Hm.T + Rm)
            np.testing.assert_allclose(surrogate_gain(P, Hm, Rm), expected, atol=1e-12)

    def test_rank_one_gain_in_anomaly_span(self):
        e = Ensemble([[1.0, 2.0, 0.0], [3.0, 1.0, 1.0]])
        _, P = ensemble_moments(e)
        K = surrogate_gain(P, np.eye(3)[:2], np.eye(2))
        a = e.members[1] - e.members[0]
        resid = K - np.outer(a, a @ K) / (a @ a)
        assert np.max(np.abs(resid)) < 1e-14

    def test_rejects_non_pd_r(self):
        with pytest.raises(NotPositiveDefiniteError):
            surrogate_gain(np.eye(2), H, [[-1.0]])


class TestPerturbedStep:
    def test_strong_data_collapse(self):
        e = Ensemble.draw(FORECAST, 50, RandomSeed(1))
        y = np.array([3.0, -2.0])
        out = perturbed_obs_step(e, np.eye(2), 1e-12 * np.eye(2), y, RandomSeed(2))
        assert np.max(np.abs(out.members - y)) < 1e-4

    def test_deterministic(self):
        e = Ensemble.draw(FORECAST, 20, RandomSeed(1))
        a = perturbed_obs_step(e, H, R, Y, RandomSeed(5))
        b = perturbed_obs_step(e, H, R, Y, RandomSeed(5))
        assert np.array_equal(a.members, b.members)
        c = perturbed_obs_step(e, H, R, Y, RandomSeed(6))
        assert not np.array_equal(a.members, c.members)

    def test_exact_gain_transport_moments(self):
        analysis, _ = kalman_analysis(FORECAST, H, R, Y)
        out = transport_draw(FORECAST, H, R, Y, 200_000, RandomSeed(9))
        m, P = ensemble_moments(out)
        np.testing.assert_allclose(m, analysis.mean, atol=0.01)
        np.testing.assert_allclose(P, analysis.cov, atol=0.01)


class TestSquareRoot:
    def test_no_observation_keeps_ensemble(self):
        e = Ensemble.draw(FORECAST, 10, RandomSeed(3))
        out = square_root_step(e, np.zeros((1, 2)), R, Y)
        np.testing.assert_allclose(out.members, e.members, atol=1e-14)

    @pytest.mark.parametrize("N", [2, 3, 10, 500])
    def test_matches_surrogate_moments(self, rng, N):
        n, m = 3, 2
        e = Ensemble(rng.standard_normal((N, n)) * [1.0, 2.0, 0.5])
        Hm, Rm, y = rng.standard_normal((m, n)), random_spd(rng, m), rng.standard_normal(m)
        target_m, target_P = surrogate_analysis_moments(e, Hm, Rm, y)
        out_m, out_P = ensemble_moments(square_root_step(e, Hm, Rm, y))
        assert np.max(np.abs(out_m - target_m)) < 1e-10
        assert np.max(np.abs(out_P - target_P)) < 1e-10

    def test_scalar_anomaly_scaling(self):
        x = np.array([[-1.0], [0.0], [1.0]])
        e = Ensemble(x)  # sample variance 1
        out = square_root_step(e, [[1.0]], [[1.0]], [0.0])
        np.testing.assert_allclose(out.members, x * np.sqrt(0.5), atol=1e-15)


class TestExactTransport:
    def test_rate(self):
        tab = exact_transport_experiment(FORECAST, H, R, Y, [100, 1000, 10_000], RandomSeed(7))
        assert abs(tab.slope_mean + 0.5) <= 0.15
        assert len(tab.rows) == 3 and tab.rows[0].seeds == 20

    def test_normality_of_members(self):
        analysis, _ = kalman_analysis(FORECAST, H, R, Y)
        out = transport_draw(FORECAST, H, R, Y, 20_000, RandomSeed(11))
        skew, kurt = normality_zscores(out.members, analysis.mean, analysis.cov)
        assert np.all(np.abs(skew) < 4) and np.all(np.abs(kurt) < 4)

    def test_small_ensemble_unbiased(self):
        analysis, _ = kalman_analysis(FORECAST, H, R, Y)
        means = np.array([ensemble_moments(transport_draw(FORECAST, H, R, Y, 2, RandomSeed(k)))[0]
                          for k in range(4000)])
        se = means.std(axis=0) / np.sqrt(len(means))
        assert np.all(np.abs(means.mean(axis=0) - analysis.mean) < 4 * se)

    def test_worker_count_irrelevant(self):
        a = exact_transport_experiment(FORECAST, H, R, Y, [50, 100], RandomSeed(1), n_seeds=4, workers=1)
        b = exact_transport_experiment(FORECAST, H, R, Y, [50, 100], RandomSeed(1), n_seeds=4, workers=4)
        assert a.to_csv() == b.to_csv()


@pytest.fixture(scope="module")
def instance():
    m = random_lgssm(np.random.default_rng(3), 2, 1, 10)
    _, obs = simulate(m, RandomSeed(1))
    return m, obs


class TestConvergence:
    def test_perturbed_rate(self, instance):
        m, obs = instance
        tab = enkf_convergence_experiment(m, obs, [100, 1000, 10_000], RandomSeed(2))
        assert abs(tab.slope_mean + 0.5) <= 0.2
        final = {r.N: r.mean_error for r in tab.rows if r.time == 10}
        assert final[10_000] < 5 * final[100] / 10

    def test_square_root_moments_exact(self, instance):
        m, obs = instance
        tab = enkf_convergence_experiment(m, obs, [2, 10, 100], RandomSeed(2), n_seeds=3, variant="sqrt")
        assert tab.extra["max_moment_residual"] < 1e-10

    def test_two_members_run(self, instance):
        m, obs = instance
        tab = enkf_convergence_experiment(m, obs, [2], RandomSeed(2), n_seeds=5)
        assert all(np.isfinite(r.mean_error) for r in tab.rows)
        assert np.isnan(tab.slope_mean)

    def test_outputs(self, instance):
        m, obs = instance
        tab = enkf_convergence_experiment(m, obs, [10, 20], RandomSeed(2), n_seeds=2)
        assert tab.to_csv().splitlines()[0] == "N,seed_count,time,mean_error,cov_error,slope_mean,slope_cov"
        assert json.loads(tab.to_json())["variant"] == "perturbed"

    def test_unknown_variant(self, instance):
        with pytest.raises(ValueError):
            run_enkf(*instance, 5, RandomSeed(0), variant="etkf")


def test_lorenz_run_completes():
    m = NonlinearSSM(20, 0.01, [1.0, 1.0, 20.0], np.eye(3), np.eye(3), np.eye(3), Q=0.01 * np.eye(3))
    _, obs = simulate(m, RandomSeed(3))
    run = run_enkf(m, obs, 30, RandomSeed(4), variant="sqrt")
    assert len(run.analyses) == 21 and max(run.moment_residuals) < 1e-10
    assert np.all(np.isfinite(run.analyses[-1].members))
