import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import random_params
from seasonal_hmm.data_io import DailySeries
from seasonal_hmm.model import (
    Calendar,
    Design,
    InvalidObservationError,
    InvalidParameterError,
    ModelSpec,
    Observation,
    OracleBoundError,
    Parameters,
    StateEmissionParams,
    TransitionParams,
    TrendForm,
    component_log_densities,
    emission_log_density,
    exact_log_likelihood,
    harmonic_design,
    period_transitions,
    seasonal_value,
    transition_matrices,
    transition_matrix,
    trend_value,
)


def _state(weights, lambdas, means, variances, d=0, trend=(0.0, 0.0), season=None, scale=None):
    D = 2 * d + 1
    return StateEmissionParams(
        weights=np.array(weights), lambdas=np.array(lambdas),
        precip_season_coeffs=np.zeros(D) if scale is None else np.array(scale),
        means=np.array(means), variances=np.array(variances),
        temp_season_coeffs=np.zeros(D) if season is None else np.array(season),
        trend_coeffs=np.array(trend))


class TestSpec:
    def test_requires_wet_component(self):
        with pytest.raises(InvalidParameterError):
            ModelSpec(2, 2, 2, 1)

    def test_piecewise_needs_breakpoint(self):
        with pytest.raises(InvalidParameterError):
            TrendForm("piecewise")

    def test_breakpoint_inside_data_years(self):
        spec = ModelSpec(1, 2, 1, 0, trend_form=TrendForm.piecewise(1980))
        spec.check_calendar(Calendar(1954), 61 * 365)
        with pytest.raises(InvalidParameterError):
            spec.check_calendar(Calendar(1980), 10 * 365)
        with pytest.raises(InvalidParameterError):
            spec.check_calendar(Calendar(1960), 21 * 365)  # last year is 1980

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InvalidParameterError):
            _state([0.5, 0.6], [1.0], [0, 0], [1, 1])


class TestTransitionMatrix:
    def test_zero_beta_uniform(self):
        spec = ModelSpec(4, 2, 1, 2)
        Q = transition_matrix(TransitionParams.zeros(4, 2), 17, spec)
        np.testing.assert_array_equal(Q, np.full((4, 4), 0.25))

    def test_degree_zero_constant_in_time(self, rng):
        spec = ModelSpec(3, 2, 1, 0)
        tp = TransitionParams(rng.normal(size=(3, 2, 1)))
        Q1 = transition_matrix(tp, 1, spec)
        for t in (2, 100, 365, 1000):
            np.testing.assert_array_equal(transition_matrix(tp, t, spec), Q1)

    def test_hand_value_quarter_period(self):
        # K=2, d=1, beta_11 = (0.5, 1, 0), t = T/4 so the cosine term vanishes
        spec = ModelSpec(2, 2, 1, 1, T=4)
        beta = np.zeros((2, 1, 3))
        beta[0, 0] = (0.5, 1.0, 0.0)
        Q = transition_matrix(TransitionParams(beta), 1, spec)
        x = 0.5 + math.cos(math.pi / 2)
        assert Q[0, 0] == pytest.approx(math.exp(x) / (1 + math.exp(x)), abs=1e-15)
        assert Q[0, 0] == pytest.approx(0.6224593312018546, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), t=st.integers(1, 5000), K=st.integers(1, 5))
    def test_stochastic_positive_periodic(self, seed, t, K):
        rng = np.random.default_rng(seed)
        spec = ModelSpec(K, 2, 1, 2)
        tp = TransitionParams(rng.normal(0, 3, (K, K - 1, 5)))
        Q = transition_matrix(tp, t, spec)
        np.testing.assert_allclose(Q.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(Q > 0) and np.all(Q < 1) or K == 1
        np.testing.assert_allclose(transition_matrix(tp, t + spec.T, spec), Q, rtol=0, atol=1e-12)

    def test_vectorised_matches_scalar(self, rng):
        spec = ModelSpec(3, 2, 1, 2)
        p = random_params(spec, rng)
        Qs = period_transitions(p, spec)
        for t in (1, 50, 200, 365):
            np.testing.assert_allclose(Qs[t - 1], transition_matrix(p.transitions, t, spec),
                                       rtol=0, atol=1e-14)

    def test_invalid_day(self):
        with pytest.raises(InvalidParameterError):
            transition_matrix(TransitionParams.zeros(2, 1), 0, ModelSpec(2, 2, 1, 1))


class TestSeasonalValue:
    def test_constant(self):
        spec = ModelSpec(1, 2, 1, 1)
        for t in (1, 77, 365):
            assert seasonal_value((3, 0, 0), t, spec) == 3

    def test_full_period_cosine(self):
        spec = ModelSpec(1, 2, 1, 1)
        assert seasonal_value((0, 1, 0), spec.T, spec) == pytest.approx(1.0, abs=1e-15)

    def test_hand_value(self):
        spec = ModelSpec(1, 2, 1, 1)
        w = 2 * np.pi * 100 / 365
        expected = 1 + 0.5 * np.cos(w) - 0.2 * np.sin(w)
        v = seasonal_value((1, 0.5, -0.2), 100, spec)
        assert v == pytest.approx(expected, abs=1e-15)
        assert v == pytest.approx(0.7272367827812056, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(InvalidParameterError):
            seasonal_value((1, 2), 5, ModelSpec(1, 2, 1, 1))

    def test_design_matches_scalar(self, rng):
        spec = ModelSpec(1, 2, 1, 3)
        c = rng.normal(size=7)
        t = np.array([1, 9, 180, 365, 366, 4000])
        H = harmonic_design(t, 3, 365)
        np.testing.assert_allclose(H @ c, [seasonal_value(c, tt, spec) for tt in t],
                                   rtol=0, atol=1e-13)


class TestTrend:
    cal = Calendar(1950)

    def test_constant(self):
        for t in (1, 5000, 20000):
            assert trend_value([10.0], t, TrendForm.constant(), self.cal) == 10.0

    def test_linear_fifty_years(self):
        f = TrendForm.linear()
        t1950, t2000 = 1, 50 * 365 + 1
        diff = trend_value([0, 0.02], t2000, f, self.cal) - trend_value([0, 0.02], t1950, f, self.cal)
        assert diff == pytest.approx(1.0, abs=1e-12)

    def test_hinge_steepens(self):
        f = TrendForm.piecewise(1980)
        c = [0.0, 0.01, 0.03]

        def slope(y0):
            t0 = (y0 - 1950) * 365 + 1
            return (trend_value(c, t0 + 365, f, self.cal) - trend_value(c, t0, f, self.cal))

        assert slope(1960) == pytest.approx(0.01)
        assert slope(1990) == pytest.approx(0.04)
        assert slope(1990) > slope(1960)


class TestEmissionDensity:
    spec = ModelSpec(1, 2, 1, 0, trend_form=TrendForm.linear())
    cal = Calendar(2000)

    def test_pure_dry_component(self):
        s = _state([1.0, 0.0], [1.0], [0.0, 0.0], [1.0, 1.0])
        lp = emission_log_density(s, Observation(0.0, 0.7, 1, 1), self.spec, self.cal)
        assert lp == pytest.approx(stats.norm.logpdf(0.7), abs=1e-14)

    def test_zero_wet_weight_impossible(self):
        s = _state([1.0, 0.0], [1.0], [0.0, 0.0], [1.0, 1.0])
        assert emission_log_density(s, Observation(2.5, 0.0, 1, 1), self.spec, self.cal) == -math.inf

    def test_hand_value(self):
        s = _state([0.5, 0.5], [1.0], [0.0, 0.0], [1.0, 1.0])
        lp = emission_log_density(s, Observation(1.0, 0.0, 1, 1), self.spec, self.cal)
        assert lp == pytest.approx(math.log(0.5 * math.exp(-1) / math.sqrt(2 * math.pi)), abs=1e-14)
        assert lp == pytest.approx(-2.612085713764618, abs=1e-14)

    def test_missing_coordinates_marginalised(self):
        s = _state([0.3, 0.7], [2.0], [1.0, -1.0], [1.0, 2.0])
        assert emission_log_density(s, Observation(None, None, 1, 1), self.spec,
                                    self.cal) == pytest.approx(0.0, abs=1e-15)
        lp = emission_log_density(s, Observation(None, 0.5, 1, 1), self.spec, self.cal)
        expected = np.log(0.3 * stats.norm.pdf(0.5, 1, 1) + 0.7 * stats.norm.pdf(0.5, -1, np.sqrt(2)))
        assert lp == pytest.approx(expected, abs=1e-13)
        assert emission_log_density(s, Observation(0.0, float("nan"), 1, 1), self.spec,
                                    self.cal) == pytest.approx(np.log(0.3), abs=1e-15)

    def test_negative_precip_rejected(self):
        with pytest.raises(InvalidObservationError):
            Observation(-1.0, 0.0, 1, 1)

    def test_integrates_to_one(self, rng):
        from scipy import integrate

        spec = ModelSpec(1, 4, 2, 1, trend_form=TrendForm.linear())
        s = _state(rng.dirichlet(np.ones(4)), [0.4, 1.7], rng.normal(0, 3, 4),
                   rng.uniform(0.5, 3, 4), d=1, trend=(5.0, 0.3), season=rng.normal(0, 2, 3),
                   scale=rng.normal(0, 0.4, 3))
        t = 123
        # Gauss-Laguerre in precipitation, rescaled to the slowest exponential rate
        slowest = min(s.lambdas) * np.exp(-seasonal_value(s.precip_season_coeffs, t, spec))
        xl, wl = np.polynomial.laguerre.laggauss(80)

        def over_precip(y):
            atom = np.exp(emission_log_density(s, Observation(0.0, y, t, 1), spec, self.cal))
            x = xl / slowest
            dens = np.exp([emission_log_density(s, Observation(xi, y, t, 1), spec, self.cal)
                           for xi in x])
            return atom + np.sum(wl * np.exp(xl) * dens) / slowest

        total, err = integrate.quad(over_precip, -np.inf, np.inf, epsabs=1e-10, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)


class TestExactLikelihood:
    def _series(self, rng, n, T=365):
        p = np.where(rng.random(n) < 0.5, 0.0, rng.exponential(2.0, n))
        return DailySeries(p, rng.normal(0, 3, n), 2000, period=T)

    def test_single_step(self, rng):
        spec = ModelSpec(3, 3, 1, 1)
        p = random_params(spec, rng)
        s = self._series(rng, 1)
        o = next(iter(s.observations()))
        expected = np.log(sum(p.initial_dist[k] * np.exp(
            emission_log_density(p.emissions[k], o, spec, s.calendar)) for k in range(3)))
        assert exact_log_likelihood(p, s, spec) == pytest.approx(expected, abs=1e-12)

    def test_single_state(self, rng):
        spec = ModelSpec(1, 2, 1, 1)
        p = random_params(spec, rng)
        s = self._series(rng, 6)
        expected = sum(emission_log_density(p.emissions[0], o, spec, s.calendar)
                       for o in s.observations())
        assert exact_log_likelihood(p, s, spec) == pytest.approx(expected, abs=1e-12)

    def test_bounds(self, rng):
        spec = ModelSpec(4, 2, 1, 0)
        with pytest.raises(OracleBoundError):
            exact_log_likelihood(random_params(spec, rng), self._series(rng, 3), spec)
        spec = ModelSpec(2, 2, 1, 0)
        with pytest.raises(OracleBoundError):
            exact_log_likelihood(random_params(spec, rng), self._series(rng, 13), spec)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        spec = ModelSpec(3, 3, 1, 1, T=7)
        p = random_params(spec, rng)
        s = self._series(rng, 6, T=7)
        perm = rng.permutation(3)
        pp = p.permuted(perm)
        Q, QP = period_transitions(p, spec), period_transitions(pp, spec)
        np.testing.assert_allclose(QP, Q[:, perm][:, :, perm], atol=1e-13)
        assert exact_log_likelihood(pp, s, spec) == pytest.approx(
            exact_log_likelihood(p, s, spec), abs=1e-10)


class TestVectorisedDensities:
    def test_matches_scalar(self, rng):
        spec = ModelSpec(3, 4, 2, 2, trend_form=TrendForm.piecewise(2003))
        p = random_params(spec, rng)
        n = 2000
        precip = np.where(rng.random(n) < 0.4, 0.0, rng.exponential(3, n))
        temp = rng.normal(10, 5, n)
        precip[rng.random(n) < 0.05] = np.nan
        temp[rng.random(n) < 0.05] = np.nan
        s = DailySeries(precip, temp, 2000)
        comp = component_log_densities(p.stacked(), spec, Design.for_series(spec, s))
        from scipy.special import logsumexp

        logf = logsumexp(comp, axis=2)
        for i in rng.choice(n, 40, replace=False):
            o = Observation(precip[i], temp[i], i + 1, i % 365 + 1)
            for k in range(3):
                assert logf[i, k] == pytest.approx(
                    emission_log_density(p.emissions[k], o, spec, s.calendar), abs=1e-10)

    def test_transition_matrices_shape(self, rng):
        beta = rng.normal(size=(4, 3, 5))
        H = harmonic_design(np.arange(1, 11), 2, 365)
        Q = transition_matrices(beta, H)
        assert Q.shape == (10, 4, 4)
        np.testing.assert_allclose(Q.sum(axis=2), 1.0, atol=1e-12)


class TestParameters:
    def test_stacked_round_trip(self, rng):
        spec = ModelSpec(3, 3, 1, 2)
        p = random_params(spec, rng)
        q = Parameters.from_stacked(p.stacked())
        for key, val in p.stacked().items():
            np.testing.assert_array_equal(q.stacked()[key], val)

    def test_immutable(self, rng):
        p = random_params(ModelSpec(2, 2, 1, 1), rng)
        with pytest.raises(ValueError):
            p.transitions.beta[0, 0, 0] = 1.0

    def test_initial_dist_checked(self, rng):
        a = random_params(ModelSpec(2, 2, 1, 1), rng).stacked()
        a["pi"] = np.array([0.6, 0.6])
        with pytest.raises(InvalidParameterError):
            Parameters.from_stacked(a)
