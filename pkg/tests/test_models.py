import json

import numpy as np
import pytest

from bayesvar.gaussian import RandomSeed
from bayesvar.instances import random_hmm, random_lgssm
from bayesvar.models import (
    DiscreteHMM,
    LinearGaussianSSM,
    NonlinearSSM,
    ObservationRecord,
    emission_loglik,
    load_model,
    lorenz63_jacobian,
    lorenz63_step,
    model_to_dict,
    simulate,
)


def test_degenerate_chain_constant_truth():
    S, T = 4, 6
    initial = np.eye(S)[2]
    hmm = DiscreteHMM(initial, [np.eye(S)] * T, np.zeros((T + 1, S)))
    truth, _ = simulate(hmm, RandomSeed(1))
    assert np.all(truth == 2)


def test_transition_frequencies_chi_square():
    P = np.array([[0.7, 0.2, 0.1], [0.3, 0.3, 0.4], [0.1, 0.1, 0.8]])
    T = 10_000
    hmm = DiscreteHMM(np.ones(3) / 3, [P] * T, np.zeros((T + 1, 3)))
    x, _ = simulate(hmm, RandomSeed(4))
    counts = np.zeros((3, 3))
    np.add.at(counts, (x[:-1], x[1:]), 1)
    expected = counts.sum(axis=1, keepdims=True) * P
    chi2 = np.sum((counts - expected) ** 2 / expected)
    # 6 degrees of freedom; 99.9% quantile is 22.46
    assert chi2 < 22.46


def test_lgssm_small_noise_increments():
    eps = 1e-4
    T = 50
    m = LinearGaussianSSM(T, [0.0], [[1.0]], [[1.0]], [[eps]], [[1.0]], [[1.0]])
    inc = np.concatenate([np.diff(simulate(m, RandomSeed(s))[0][:, 0]) for s in range(40)])
    # sample variance of 2000 draws: relative standard error about 3%
    assert inc.var() == pytest.approx(eps, rel=0.15)


@pytest.mark.parametrize("kind", ["hmm", "lgssm", "lorenz"])
def test_simulate_deterministic(kind, rng):
    if kind == "hmm":
        model = random_hmm(rng, 3, 4)
        model = DiscreteHMM(model.initial, model.transitions, model.logliks, np.full((3, 2), 0.5))
    elif kind == "lgssm":
        model = random_lgssm(rng, 2, 1, 5)
    else:
        model = NonlinearSSM(5, 0.01, [1.0, 1.0, 20.0], np.eye(3), np.eye(3), np.eye(3))
    a = simulate(model, RandomSeed(9, 2))
    b = simulate(model, RandomSeed(9, 2))
    assert np.array_equal(a[0], b[0])
    assert all(np.array_equal(u, v) for u, v in zip(a[1].y, b[1].y))


class TestLorenz:
    def test_origin_fixed(self):
        np.testing.assert_array_equal(lorenz63_step(np.zeros(3), 0.01), np.zeros(3))

    def test_nontrivial_fixed_point(self):
        c = np.sqrt(8 / 3 * 27)
        x = np.array([c, c, 27.0])
        assert np.sqrt(72) == pytest.approx(c)
        np.testing.assert_allclose(lorenz63_step(x, 0.01), x, atol=1e-12)

    def test_fourth_order_local_error(self):
        x = np.array([1.0, 3.0, 15.0])
        diffs = []
        for dt in (0.02, 0.01, 0.005):
            two_half = lorenz63_step(lorenz63_step(x, dt / 2), dt / 2)
            diffs.append(np.linalg.norm(two_half - lorenz63_step(x, dt)))
        # local error O(dt^5): halving dt divides the difference by about 32
        ratios = [diffs[0] / diffs[1], diffs[1] / diffs[2]]
        assert all(25 < r < 40 for r in ratios)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            lorenz63_step(np.ones(3), 0.0)

    def test_jacobian_matches_finite_differences(self):
        x = np.array([-4.0, 2.0, 21.0])
        J = lorenz63_jacobian(x, 0.02)
        h = 1e-6
        fd = np.column_stack([(lorenz63_step(x + h * e, 0.02) - lorenz63_step(x - h * e, 0.02)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(J, fd, atol=1e-7)


class TestEmission:
    def test_hmm_lookup(self, rng):
        hmm = random_hmm(rng, 3, 2)
        assert emission_loglik(hmm, 1, 2) == hmm.logliks[1, 2]

    def test_zero_innovation(self, rng):
        m = random_lgssm(rng, 2, 2, 1)
        x = np.array([0.3, -0.7])
        obs = ObservationRecord((m.H[0] @ x, m.H[1] @ x))
        expected = -0.5 * np.linalg.slogdet(2 * np.pi * m.R[0])[1]
        assert emission_loglik(m, 0, x, obs) == pytest.approx(expected, abs=1e-12)

    def test_scalar_hand_value(self):
        m = LinearGaussianSSM(0, [0.0], [[1.0]], [], [], [[1.0]], [[1.0]])
        obs = ObservationRecord(([2.5],))
        assert emission_loglik(m, 0, [0.5], obs) == pytest.approx(-0.5 * np.log(2 * np.pi) - 2, abs=1e-14)

    def test_out_of_range(self, rng):
        with pytest.raises(IndexError):
            emission_loglik(random_hmm(rng, 2, 2), 3, 0)


class TestValidation:
    def test_hmm_rejects_non_stochastic(self):
        with pytest.raises(ValueError):
            DiscreteHMM([0.5, 0.5], [np.array([[0.5, 0.6], [0.5, 0.5]])], np.zeros((2, 2)))

    def test_lgssm_rejects_non_pd_q(self):
        with pytest.raises(np.linalg.LinAlgError):
            LinearGaussianSSM(1, [0.0], [[1.0]], [[1.0]], [[0.0]], [[1.0]], [[1.0]])


class TestJson:
    def test_hmm_roundtrip_with_zero_atom(self, rng):
        hmm = random_hmm(rng, 3, 2)
        ll = hmm.logliks.copy()
        ll[1, 0] = -np.inf
        hmm = DiscreteHMM(hmm.initial, hmm.transitions, ll)
        d = json.loads(json.dumps(model_to_dict(hmm)))
        back = load_model(d)
        assert np.array_equal(back.logliks, hmm.logliks)

    def test_lgssm_roundtrip(self, rng):
        m = random_lgssm(rng, 2, 1, 3)
        back = load_model(json.dumps(model_to_dict(m)))
        for a, b in zip(back.A, m.A):
            np.testing.assert_array_equal(a, b)

    def test_lorenz_from_file(self, tmp_path):
        path = tmp_path / "l63.json"
        path.write_text(json.dumps({"kind": "lorenz63", "T": 3, "dt": 0.01, "xb": [1, 1, 1],
                                    "B": np.eye(3).tolist(), "H": np.eye(3).tolist(), "R": np.eye(3).tolist()}))
        m = load_model(path)
        assert m.T == 3 and m.Q is None

    def test_hmm_from_symbols(self):
        m = load_model({"kind": "hmm", "initial": [0.5, 0.5], "transitions": [[[0.9, 0.1], [0.1, 0.9]]],
                        "emission": [[0.8, 0.2], [0.3, 0.7]], "symbols": [0, 1]})
        np.testing.assert_allclose(np.exp(m.logliks), [[0.8, 0.3], [0.2, 0.7]])

    def test_observation_record_roundtrip(self, tmp_path):
        rec = ObservationRecord(([1.0, 2.0], [3.0, 4.0]), seed=5)
        rec.to_json(tmp_path / "obs.json")
        back = ObservationRecord.from_json(tmp_path / "obs.json")
        assert back.seed == 5 and np.array_equal(back.stacked(), rec.stacked())

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            load_model({"kind": "lorenz96"})
