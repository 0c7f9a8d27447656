"""
Tests for Kalman tracking, the Riccati fixed point and the intermittent covariance study
"""
import numpy as np
import pytest
from pydantic import ValidationError
from scipy.linalg import solve_discrete_are

from src.models.tracking import KalmanTrack, LtiModel
from src.services import tracker
from src.utils.exceptions import InvalidArgumentError
from tests.conftest import track


def _scalar(f=1.0, q=1.0, h=1.0, r=1.0) -> LtiModel:
    return LtiModel(F=[[f]], Q=[[q]], H=[[h]], R=[[r]], dt=1.0)


def _static(q=0.1, r=0.05) -> LtiModel:
    return LtiModel(F=np.eye(2), Q=q * np.eye(2), H=np.eye(2), R=r * np.eye(2), dt=0.1)


class TestModel:
    def test_constant_velocity_shapes(self, cv_model):
        assert cv_model.n_a == 4
        assert cv_model.n_z == 2
        np.testing.assert_allclose(cv_model.F[:2, 2:], 0.1 * np.eye(2))

    def test_singular_noise_rejected(self):
        with pytest.raises(ValidationError):
            LtiModel(F=np.eye(2), Q=np.eye(2), H=np.eye(2), R=np.zeros((2, 2)))

    def test_unobservable_rejected(self):
        with pytest.raises(ValidationError):
            LtiModel(F=np.eye(2), Q=np.eye(2), H=[[1.0, 0.0]], R=[[1.0]])

    def test_transition_matches_repeated_steps(self, cv_model):
        Fk, Qk = cv_model.transition(3)
        P = np.zeros((4, 4))
        for _ in range(3):
            P = cv_model.F @ P @ cv_model.F.T + cv_model.Q
        np.testing.assert_allclose(Fk, np.linalg.matrix_power(cv_model.F, 3))
        np.testing.assert_allclose(Qk, P, atol=1e-15)

    def test_track_dimension_checked(self, cv_model):
        with pytest.raises(ValidationError):
            KalmanTrack(id=0, mean=np.zeros(2), cov=np.eye(2), model=cv_model)


class TestFiltering:
    def test_zero_steps_is_identity(self, cv_model):
        t = track(0, cv_model, [1.0, 2.0], [0.5, 0.0])
        assert tracker.predict(t, 0) is t

    def test_negative_steps(self, cv_model):
        with pytest.raises(InvalidArgumentError):
            tracker.predict(track(0, cv_model, [0.0, 0.0]), -1)

    def test_static_model_accumulates_noise(self):
        model = _static(q=0.1)
        t = KalmanTrack(id=0, mean=[1.0, -1.0], cov=0.2 * np.eye(2), model=model)
        out = tracker.predict(t, 5)
        np.testing.assert_allclose(out.mean, [1.0, -1.0])
        np.testing.assert_allclose(out.cov, (0.2 + 5 * 0.1) * np.eye(2))

    def test_constant_velocity_moves_mean(self, cv_model):
        out = tracker.predict(track(0, cv_model, [0.0, 0.0], [1.0, -2.0]), 10)
        np.testing.assert_allclose(out.position(), [1.0, -2.0])
        np.testing.assert_allclose(out.velocity(), [1.0, -2.0])

    def test_precise_measurement_pins_position(self):
        model = LtiModel.constant_velocity(dt=0.1, q=0.05, r=1e-10)
        t = track(0, model, [0.0, 0.0], pos_var=1.0)
        out = tracker.update(t, [0.7, -0.3], time=1.5)
        np.testing.assert_allclose(out.position(), [0.7, -0.3], atol=1e-8)
        assert out.last_update == 1.5

    def test_scalar_kalman_by_hand(self):
        model = _scalar(q=0.5, r=2.0)
        t = KalmanTrack(id=3, mean=[1.0], cov=[[1.0]], model=model)
        out = tracker.update(tracker.predict(t), [4.0])
        gain = 1.5 / 3.5
        assert out.mean[0] == pytest.approx(1.0 + gain * 3.0)
        assert out.cov[0, 0] == pytest.approx((1.0 - gain) * 1.5)

    def test_update_shrinks_covariance(self, cv_model, rng):
        a = rng.normal(size=(4, 4))
        t = KalmanTrack(id=0, mean=np.zeros(4), cov=a @ a.T + 0.1 * np.eye(4), model=cv_model)
        out = tracker.update(t, [0.1, 0.2])
        assert np.linalg.eigvalsh(t.cov - out.cov).min() >= -1e-12

    @pytest.mark.parametrize("bad", [[1.0], [np.nan, 0.0], [1.0, 2.0, 3.0]])
    def test_bad_measurement(self, cv_model, bad):
        with pytest.raises(InvalidArgumentError):
            tracker.update(track(0, cv_model, [0.0, 0.0]), bad)

    def test_spawn_track(self, cv_model):
        t = tracker.spawn_track(4, [2.0, 3.0], cv_model, v_max=1.5, time=0.7)
        np.testing.assert_allclose(t.position(), [2.0, 3.0])
        np.testing.assert_allclose(t.velocity(), [0.0, 0.0])
        np.testing.assert_allclose(tracker.position_cov(t), cv_model.R)
        np.testing.assert_allclose(t.cov[2:, 2:], 2.25 * np.eye(2))
        assert t.last_update == 0.7

    def test_covariance_norm(self, cv_model):
        cov = np.diag([0.3, 0.1, 5.0, 5.0])
        assert tracker.covariance_norm(cov, cv_model.H) == pytest.approx(0.3)
        assert tracker.covariance_norm(cov) == pytest.approx(5.0)


class TestRiccati:
    def test_scalar_golden_ratio(self):
        P = tracker.riccati_fixed_point(_scalar())
        assert P[0, 0] == pytest.approx((np.sqrt(5.0) - 1.0) / 2.0, abs=1e-8)

    def test_zero_dynamics(self):
        model = LtiModel(F=np.zeros((2, 2)), Q=0.4 * np.eye(2), H=np.eye(2), R=0.1 * np.eye(2))
        P = tracker.riccati_fixed_point(model)
        np.testing.assert_allclose(P, 0.08 * np.eye(2), atol=1e-12)

    def test_matches_discrete_are(self, cv_model):
        coarse = cv_model.lifted(20)
        P = tracker.riccati_fixed_point(coarse)
        predicted = solve_discrete_are(coarse.F.T, coarse.H.T, coarse.Q, coarse.R)
        S = coarse.H @ predicted @ coarse.H.T + coarse.R
        filtered = predicted - predicted @ coarse.H.T @ np.linalg.solve(S, coarse.H @ predicted)
        np.testing.assert_allclose(P, filtered, atol=1e-7)

    def test_is_fixed_point(self, cv_model):
        coarse = cv_model.lifted(20)
        P = tracker.riccati_fixed_point(coarse)
        t = KalmanTrack(id=0, mean=np.zeros(4), cov=P, model=coarse)
        again = tracker.update(tracker.predict(t), [0.0, 0.0])
        assert np.abs(again.cov - P).max() < 1e-8


class TestCovarianceStudy:
    def test_certain_detection_collapses_to_fixed_point(self, cv_model):
        report = tracker.intermittent_covariance_study(cv_model, 1.0, horizons=20, trials=50,
                                                       steps_per_horizon=20, rng_seed=0)
        expected = tracker.covariance_norm(tracker.riccati_fixed_point(cv_model.lifted(20)), cv_model.H)
        np.testing.assert_allclose(report.norms, expected, atol=1e-6)

    def test_probability_bounds(self, cv_model):
        for p in (0.0, 1.5):
            with pytest.raises(InvalidArgumentError):
                tracker.intermittent_covariance_study(cv_model, p, horizons=5, trials=10, steps_per_horizon=20)

    def test_zero_trials(self, cv_model):
        with pytest.raises(InvalidArgumentError):
            tracker.intermittent_covariance_study(cv_model, 0.5, horizons=5, trials=0, steps_per_horizon=20)

    def test_reproducible(self, cv_model):
        a = tracker.intermittent_covariance_study(cv_model, 0.65, horizons=10, trials=200,
                                                  steps_per_horizon=20, rng_seed=42)
        b = tracker.intermittent_covariance_study(cv_model, 0.65, horizons=10, trials=200,
                                                  steps_per_horizon=20, rng_seed=42)
        assert a.norms == b.norms
        assert a.seed == 42

    def test_higher_detection_dominates(self, cv_model):
        low = tracker.intermittent_covariance_study(cv_model, 0.65, horizons=20, trials=10_000,
                                                    steps_per_horizon=20, rng_seed=7)
        high = tracker.intermittent_covariance_study(cv_model, 0.75, horizons=20, trials=10_000,
                                                     steps_per_horizon=20, rng_seed=7)
        assert high.mean_norm < low.mean_norm
        assert all(np.asarray(high.norms) <= np.asarray(low.norms) + 1e-12)
        for threshold, fraction in low.cdf_at.items():
            assert high.cdf_at[threshold] >= fraction
        assert low.pmf_peak_fraction > 0.5
        assert high.pmf_peak_fraction > 0.5

    def test_summary_omits_raw_norms(self, cv_model):
        report = tracker.intermittent_covariance_study(cv_model, 0.75, horizons=3, trials=20,
                                                       steps_per_horizon=20, rng_seed=1,
                                                       thresholds=(0.1, 0.5))
        summary = report.summary()
        assert "norms" not in summary
        assert set(summary["cdf_at"]) == {0.1, 0.5}
        assert summary["trials"] == 20
