"""Independent reference implementations used as test oracles.

Everything here is written directly from the generative-model formulas
with explicit loops and scipy.stats, deliberately avoiding the package's
vectorized non-centered evaluation paths.
"""

import math

import numpy as np
from scipy.stats import multivariate_normal, norm


def centered_quantities(spec, pv):
    """Constrained quantities via the centered construction, one day at a time."""
    S, T = spec.n_states, spec.n_days
    L_C = np.linalg.cholesky(np.asarray(spec.terminal_cov))
    L_mu = np.linalg.cholesky(np.asarray(spec.walk_cov))
    L_u = np.linalg.cholesky(np.asarray(spec.state_error_cov))
    mu = np.zeros((T, S))
    mu[T - 1] = np.asarray(spec.fundamentals) + L_C @ np.asarray(pv.z_T)
    for t in range(T - 2, -1, -1):
        mu[t] = mu[t + 1] + L_mu @ np.asarray(pv.z_walk)[:, t]
    u = L_u @ np.asarray(pv.z_u)
    sigma_state = math.exp(pv.log_sigma_state)
    sigma_national = math.exp(pv.log_sigma_national)
    return mu, u, sigma_state, sigma_national


def poll_probability(spec, pv, poll, eps_index, mu, u, sigma_state, sigma_national):
    if poll.state is not None:
        base = mu[poll.day - 1, poll.state - 1] + u[poll.state - 1]
        sigma = sigma_state
    else:
        base = 0.0
        for s in range(spec.n_states):
            base += spec.weights[s] * (mu[poll.day - 1, s] + u[s])
        sigma = sigma_national
    alpha = (spec.prior_scales.house * pv.house_raw[poll.pollster]
             + spec.prior_scales.mode * pv.mode_raw[poll.mode]
             + spec.prior_scales.population * pv.population_raw[poll.population])
    zeta = base + alpha + sigma * pv.eps[eps_index]
    return 1.0 / (1.0 + math.exp(-zeta))


def oracle_probabilities(spec, polls, pv):
    mu, u, ss, sn = centered_quantities(spec, pv)
    return np.array([
        poll_probability(spec, pv, poll, i, mu, u, ss, sn)
        for i, poll in enumerate(polls)
    ])


def binom_logpmf(y, n, p):
    coeff = math.lgamma(n + 1) - math.lgamma(y + 1) - math.lgamma(n - y + 1)
    return coeff + y * math.log(p) + (n - y) * math.log1p(-p)


def oracle_log_likelihood(spec, polls, pv, gammas=None):
    probs = oracle_probabilities(spec, polls, pv)
    total = 0.0
    for i, poll in enumerate(polls):
        g = 1.0 if gammas is None else gammas[i]
        if g == 0.0:
            continue
        total += g * binom_logpmf(poll.y, poll.n, probs[i])
    return total


def oracle_log_prior(spec, pv):
    """Term-by-term density sum in the unconstrained space."""
    total = 0.0
    for block in (pv.z_T, np.asarray(pv.z_walk).ravel(), pv.z_u,
                  pv.house_raw, pv.mode_raw, pv.population_raw, pv.eps):
        for value in np.asarray(block).ravel():
            total += norm.logpdf(value)
    for x, s in ((pv.log_sigma_state, spec.prior_scales.sigma_state),
                 (pv.log_sigma_national, spec.prior_scales.sigma_national)):
        sigma = math.exp(x)
        halfnormal = 0.5 * math.log(2 / math.pi) - math.log(s) - sigma**2 / (2 * s * s)
        total += halfnormal + x  # change of variables to the log scale
    return total


def terminal_anchor_logpdf(spec, pv, mean=None, cov_scale=1.0):
    """MVN density of mu_T under a (possibly overridden) terminal prior."""
    mu, _, _, _ = centered_quantities(spec, pv)
    mean = np.asarray(spec.fundamentals) if mean is None else np.asarray(mean)
    return multivariate_normal.logpdf(mu[-1], mean=mean,
                                      cov=cov_scale * np.asarray(spec.terminal_cov))


def walk_logpdf(spec, pv, cov_scale=1.0):
    """Sum of the random-walk transition densities."""
    mu, _, _, _ = centered_quantities(spec, pv)
    total = 0.0
    for t in range(spec.n_days - 1):
        total += multivariate_normal.logpdf(
            mu[t], mean=mu[t + 1], cov=cov_scale * np.asarray(spec.walk_cov))
    return total


def finite_difference_gradient(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        up = theta.copy()
        up[j] += h
        down = theta.copy()
        down[j] -= h
        grad[j] = (f(up) - f(down)) / (2 * h)
    return grad
