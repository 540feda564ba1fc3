import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pollsmc.errors import ConfigurationError, DataError, EvaluationError, UsageError
from pollsmc.knobs import HypotheticalPoll, Knob, LikelihoodOverride, PriorOverride
from pollsmc.model import (
    LOG_2PI,
    ModelSpec,
    ParameterLayout,
    ParameterVector,
    PollObservation,
    PosteriorTarget,
    PriorScales,
    grad_log_posterior,
    knob_log_h,
    log_likelihood,
    log_posterior_unnorm,
    log_prior,
    transform,
)

from conftest import build_polls, build_spec, random_params
from oracle_reference import (
    finite_difference_gradient,
    oracle_log_likelihood,
    oracle_log_prior,
    oracle_probabilities,
    terminal_anchor_logpdf,
)


def unit_spec():
    return ModelSpec(
        n_states=1, n_days=1,
        weights=np.array([1.0]),
        fundamentals=np.array([0.0]),
        terminal_cov=np.array([[1.0]]),
        walk_cov=np.array([[1.0]]),
        state_error_cov=np.array([[1.0]]),
        n_pollsters=1, n_modes=1, n_populations=1,
        prior_scales=PriorScales(1.0, 1.0, 1.0, 1.0, 1.0),
        hypothetical_slots=0,
    )


class TestLayout:
    def test_dimension_formula(self, small_spec, small_polls, small_layout):
        S, T = small_spec.n_states, small_spec.n_days
        tables = small_spec.n_pollsters + small_spec.n_modes + small_spec.n_populations
        n_eps = len(small_polls) + small_spec.hypothetical_slots
        assert small_layout.dim == S * T + S + tables + 2 + n_eps

    def test_blocks_are_views(self, small_layout, rng):
        grad = np.zeros((4, small_layout.dim))
        blk = small_layout.block(grad, "z_walk")
        blk += 1.0
        assert np.sum(grad) == blk.size
        blk2 = small_layout.block(grad, "eps")
        blk2 += 2.0
        assert np.sum(grad != 0.0) == blk.size + blk2.size

    def test_header_round_trip(self, small_layout):
        rebuilt = ParameterLayout.from_header(small_layout.header())
        assert rebuilt.dim == small_layout.dim
        assert rebuilt.slices == small_layout.slices

    def test_wrong_shape_rejected(self, small_layout):
        with pytest.raises(ConfigurationError):
            ParameterVector(small_layout, np.zeros(small_layout.dim + 1))


class TestTransform:
    def test_zero_params_propagate_anchor(self, small_spec, small_polls, small_layout):
        pv = ParameterVector.zeros(small_layout)
        latent = transform(pv, small_spec, small_polls)
        assert np.array_equal(latent.mu, np.tile(small_spec.fundamentals, (small_spec.n_days, 1)))
        assert np.array_equal(latent.u, np.zeros(small_spec.n_states))

    def test_single_national_poll_at_origin(self):
        spec = unit_spec()
        poll = PollObservation("p0", day=1, state=None, y=1, n=2,
                               pollster=0, mode=0, population=0)
        layout = ParameterLayout.for_campaign(spec, 1)
        latent = transform(ParameterVector.zeros(layout), spec, [poll])
        assert latent.p[0] == 0.5

    def test_matches_centered_oracle(self, small_spec, small_polls, small_layout, rng):
        for _ in range(5):
            pv = random_params(small_layout, rng)
            latent = transform(pv, small_spec, small_polls)
            expected = oracle_probabilities(small_spec, small_polls, pv)
            np.testing.assert_allclose(latent.p, expected, rtol=1e-10)

    def test_walk_reconstruction_exact(self, small_spec, small_polls, small_layout, rng):
        pv = random_params(small_layout, rng)
        latent = transform(pv, small_spec, small_polls)
        steps = np.einsum("ij,jt->it", small_spec.chol_walk, np.asarray(pv.z_walk))
        for t in range(small_spec.n_days - 1):
            assert np.array_equal(latent.mu[t], latent.mu[t + 1] + steps[:, t])

    def test_non_finite_input_raises(self, small_spec, small_polls, small_layout):
        theta = small_layout.zeros()
        theta[0] = np.nan
        with pytest.raises(EvaluationError):
            transform(ParameterVector(small_layout, theta), small_spec, small_polls)

    def test_poll_count_mismatch(self, small_spec, small_polls, small_layout):
        with pytest.raises(ConfigurationError):
            transform(ParameterVector.zeros(small_layout), small_spec, small_polls[:-1])

    def test_pure_function(self, small_spec, small_polls, small_layout, rng):
        pv = random_params(small_layout, rng)
        a = transform(pv, small_spec, small_polls)
        b = transform(pv, small_spec, small_polls)
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.p, b.p)


class TestLogPrior:
    def test_origin_closed_form(self):
        spec = unit_spec()
        layout = ParameterLayout.for_campaign(spec, 0)
        value = log_prior(ParameterVector.zeros(layout), spec)
        n_std = layout.dim - 2
        expected = -0.5 * n_std * LOG_2PI + 2 * (0.5 * math.log(2 / math.pi) - 0.5)
        assert value == pytest.approx(expected, rel=1e-14)

    def test_quadratic_in_standardized_coordinate(self, small_spec, small_layout):
        base = log_prior(ParameterVector.zeros(small_layout), small_spec)
        theta = small_layout.zeros()
        theta[0] = 1.7
        shifted = log_prior(ParameterVector(small_layout, theta), small_spec)
        assert shifted - base == pytest.approx(-(1.7**2) / 2, rel=1e-12)

    def test_matches_term_by_term_oracle(self, small_spec, small_layout, rng):
        for _ in range(5):
            pv = random_params(small_layout, rng)
            assert log_prior(pv, small_spec) == pytest.approx(
                oracle_log_prior(small_spec, pv), rel=1e-10)


class TestLogLikelihood:
    def test_single_poll_half(self):
        spec = unit_spec()
        poll = PollObservation("p0", day=1, state=None, y=1, n=2,
                               pollster=0, mode=0, population=0)
        layout = ParameterLayout.for_campaign(spec, 1)
        value = log_likelihood(ParameterVector.zeros(layout), spec, [poll])
        assert value == pytest.approx(math.log(0.5), rel=1e-12)

    def test_zero_powers_give_zero(self, small_spec, small_polls, small_layout, rng):
        pv = random_params(small_layout, rng)
        assert log_likelihood(pv, small_spec, small_polls,
                              weights=np.zeros(len(small_polls))) == 0.0

    def test_matches_direct_summation(self, small_spec, small_layout, rng):
        polls = build_polls(small_spec, 20, seed=7)
        spec20 = small_spec
        layout = ParameterLayout.for_campaign(spec20, len(polls))
        for _ in range(5):
            pv = random_params(layout, rng)
            got = log_likelihood(pv, spec20, polls)
            assert got == pytest.approx(oracle_log_likelihood(spec20, polls, pv), rel=1e-10)

    def test_power_weights_match_oracle(self, small_spec, small_polls, small_layout, rng):
        pv = random_params(small_layout, rng)
        gammas = rng.uniform(0.0, 1.0, size=len(small_polls))
        gammas[0] = 0.0
        got = log_likelihood(pv, small_spec, small_polls, weights=gammas)
        assert got == pytest.approx(
            oracle_log_likelihood(small_spec, small_polls, pv, gammas), rel=1e-10)

    def test_invalid_counts_rejected(self):
        with pytest.raises(DataError):
            PollObservation("bad", day=1, state=1, y=10, n=5,
                            pollster=0, mode=0, population=0)


class TestLogPosterior:
    def test_identity_knob_is_exact_sum(self, small_spec, small_polls, small_layout, rng):
        pv = random_params(small_layout, rng)
        total = log_posterior_unnorm(pv, small_spec, small_polls, Knob())
        assert total == log_prior(pv, small_spec) + log_likelihood(pv, small_spec, small_polls)

    def test_hypothetical_poll_adds_its_pmf(self, small_spec, small_polls, small_layout, rng):
        pv = random_params(small_layout, rng)
        hp = HypotheticalPoll(day=2, state=1, y=120, n=200, pollster=0, mode=0,
                              population=0, eps_slot=0, power=1.0)
        knob = Knob(hypothetical=(hp,))
        base = log_posterior_unnorm(pv, small_spec, small_polls)
        with_hp = log_posterior_unnorm(pv, small_spec, small_polls, knob)
        latent = transform(pv, small_spec, small_polls)
        mu, u = latent.mu, latent.u
        zeta = (mu[hp.day - 1, hp.state - 1] + u[hp.state - 1]
                + small_spec.prior_scales.house * pv.house_raw[hp.pollster]
                + small_spec.prior_scales.mode * pv.mode_raw[hp.mode]
                + small_spec.prior_scales.population * pv.population_raw[hp.population]
                + latent.sigma_state * pv.eps[len(small_polls) + hp.eps_slot])
        p = 1 / (1 + math.exp(-zeta))
        pmf = (math.lgamma(hp.n + 1) - math.lgamma(hp.y + 1) - math.lgamma(hp.n - hp.y + 1)
               + hp.y * math.log(p) + (hp.n - hp.y) * math.log1p(-p))
        assert with_hp - base == pytest.approx(pmf, rel=1e-10)

    def test_fundamentals_shift_matches_mvn_difference(self, small_spec, small_polls,
                                                       small_layout, rng):
        pv = random_params(small_layout, rng)
        shift = np.zeros(small_spec.n_states)
        shift[1] = 0.25
        new_loc = tuple(np.asarray(small_spec.fundamentals) + shift)
        knob = Knob(prior_overrides={"terminal": PriorOverride(loc=new_loc)})
        delta = (log_posterior_unnorm(pv, small_spec, small_polls, knob)
                 - log_posterior_unnorm(pv, small_spec, small_polls))
        expected = (terminal_anchor_logpdf(small_spec, pv, mean=new_loc)
                    - terminal_anchor_logpdf(small_spec, pv))
        assert delta == pytest.approx(expected, rel=1e-10)

    def test_log_h_decomposition(self, small_spec, small_polls, small_layout, rng):
        knobs = [
            Knob(prior_overrides={"terminal": PriorOverride(cov_scale=1.25)}),
            Knob(prior_overrides={"walk": PriorOverride(cov_scale=0.8)}),
            Knob(prior_overrides={"house": PriorOverride(scale=0.1, power=0.7)}),
            Knob(prior_overrides={"sigma_national": PriorOverride(scale=0.09)}),
            Knob(prior_overrides={"eps": PriorOverride(power=0.5)}),
            Knob(likelihood_overrides={2: LikelihoodOverride(y_value=250.5, power=0.9)}),
            Knob(hypothetical=(HypotheticalPoll(day=1, state=None, y=50, n=100, pollster=1,
                                                mode=0, population=1, eps_slot=2, power=0.4),)),
        ]
        for knob in knobs:
            for _ in range(3):
                pv = random_params(small_layout, rng)
                lh = knob_log_h(small_spec, small_polls, knob, pv)
                direct = (log_posterior_unnorm(pv, small_spec, small_polls, knob)
                          - log_posterior_unnorm(pv, small_spec, small_polls))
                assert lh == pytest.approx(direct, rel=1e-10, abs=1e-10)

    def test_gamma_power_scales_gradient_linearly(self, small_spec, small_polls,
                                                  small_layout, rng):
        pv = random_params(small_layout, rng)
        base = grad_log_posterior(pv, small_spec, small_polls)
        knob_half = Knob(likelihood_overrides={0: LikelihoodOverride(power=0.5)})
        knob_zero = Knob(likelihood_overrides={0: LikelihoodOverride(power=0.0)})
        g_half = grad_log_posterior(pv, small_spec, small_polls, knob_half)
        g_zero = grad_log_posterior(pv, small_spec, small_polls, knob_zero)
        np.testing.assert_allclose(base - g_zero, 2 * (g_half - g_zero), rtol=1e-9, atol=1e-12)


class TestGradient:
    def test_prior_mode_gradient_vanishes(self):
        spec = unit_spec()
        layout = ParameterLayout.for_campaign(spec, 0)
        grad = grad_log_posterior(ParameterVector.zeros(layout), spec, [])
        std = np.concatenate([grad[:layout.slices["log_sigma_state"].start],
                              grad[layout.slices["eps"].start:]])
        assert np.array_equal(std, np.zeros_like(std))

    @pytest.mark.parametrize("knob", [
        Knob(),
        Knob(prior_overrides={"terminal": PriorOverride(loc=None, cov_scale=1.3, power=0.9)}),
        Knob(prior_overrides={"walk": PriorOverride(cov_scale=0.7)}),
        Knob(prior_overrides={"state_errors": PriorOverride(cov_scale=1.5, power=1.2)}),
        Knob(prior_overrides={"mode": PriorOverride(scale=0.1)}),
        Knob(prior_overrides={"sigma_state": PriorOverride(scale=0.2, power=0.8)}),
        Knob(prior_overrides={"eps": PriorOverride(power=0.6)}),
        Knob(likelihood_overrides={1: LikelihoodOverride(y_value=180.25, power=0.7)}),
        Knob(hypothetical=(HypotheticalPoll(day=3, state=2, y=90, n=150, pollster=2,
                                            mode=1, population=0, eps_slot=1, power=0.8),)),
    ])
    def test_matches_finite_differences(self, small_spec, small_polls, small_layout,
                                        rng, knob):
        pv = random_params(small_layout, rng, scale=0.5)
        grad = grad_log_posterior(pv, small_spec, small_polls, knob)
        fd = finite_difference_gradient(
            lambda th: log_posterior_unnorm(ParameterVector(small_layout, th),
                                            small_spec, small_polls, knob),
            pv.theta)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)


class TestBatchedEvaluation:
    def test_batch_matches_single_bitwise(self, small_spec, small_polls, small_layout, rng):
        # Bit-equality between lone and batched evaluation is what makes
        # thread-partitioned rejuvenation deterministic.
        knob = Knob(
            prior_overrides={"terminal": PriorOverride(cov_scale=1.2)},
            likelihood_overrides={0: LikelihoodOverride(power=0.5)},
            hypothetical=(HypotheticalPoll(day=2, state=1, y=55, n=100, pollster=0,
                                           mode=0, population=0, eps_slot=0, power=1.0),),
        )
        target = PosteriorTarget.build(small_spec, small_polls, knob, small_layout)
        block = rng.normal(size=(16, small_layout.dim))
        vals, grads = target.batch_value_and_grad(block)
        for r in range(block.shape[0]):
            v, g = target.value_and_grad(block[r])
            assert v == vals[r]
            assert np.array_equal(g, grads[r])

    def test_log_h_batch_matches_single(self, small_spec, small_polls, small_layout, rng):
        knob = Knob(prior_overrides={"walk": PriorOverride(cov_scale=1.4)})
        block = rng.normal(size=(8, small_layout.dim))
        batch = knob_log_h(small_spec, small_polls, knob, block, layout=small_layout)
        for r in range(8):
            single = knob_log_h(small_spec, small_polls, knob,
                                ParameterVector(small_layout, block[r]))
            assert single == batch[r]


class TestSpecValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            build_spec().__class__(
                n_states=2, n_days=3,
                weights=np.array([0.6, 0.5]),
                fundamentals=np.zeros(2),
                terminal_cov=np.eye(2), walk_cov=np.eye(2), state_error_cov=np.eye(2),
                n_pollsters=1, n_modes=1, n_populations=1,
                prior_scales=PriorScales(1, 1, 1, 1, 1),
            )

    def test_non_spd_rejected(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ConfigurationError):
            ModelSpec(
                n_states=2, n_days=3,
                weights=np.array([0.5, 0.5]),
                fundamentals=np.zeros(2),
                terminal_cov=bad, walk_cov=np.eye(2), state_error_cov=np.eye(2),
                n_pollsters=1, n_modes=1, n_populations=1,
                prior_scales=PriorScales(1, 1, 1, 1, 1),
            )

    def test_scales_positive(self):
        with pytest.raises(ConfigurationError):
            PriorScales(1.0, -0.1, 1.0, 1.0, 1.0)


@given(seed=st.integers(0, 2**32 - 1), x=st.floats(-3, 3, allow_nan=False))
@settings(max_examples=25, deadline=None)
def test_log_h_zero_for_identity_everywhere(seed, x):
    spec = build_spec(S=2, T=3, slots=1)
    polls = build_polls(spec, 3, seed=5)
    layout = ParameterLayout.for_campaign(spec, len(polls))
    theta = np.random.default_rng(seed).normal(size=layout.dim)
    theta[0] = x
    pv = ParameterVector(layout, theta)
    assert knob_log_h(spec, polls, Knob(), pv) == 0.0
