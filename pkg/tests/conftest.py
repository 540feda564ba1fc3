import numpy as np
import pytest

from pollsmc.model import ModelSpec, ParameterLayout, ParameterVector, PollObservation, PriorScales


def random_spd(rng, size, scale):
    a = rng.normal(size=(size, size))
    m = a @ a.T / size + np.eye(size)
    d = np.sqrt(np.diag(m))
    corr = m / np.outer(d, d)
    return corr * scale**2


def build_spec(S=3, T=5, n_pollsters=3, n_modes=2, n_populations=2, slots=4, seed=711):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 2.0, size=S)
    w = w / w.sum()
    # Renormalize in float so the sum-to-one check passes exactly.
    w[-1] = 1.0 - float(np.sum(w[:-1]))
    return ModelSpec(
        n_states=S,
        n_days=T,
        weights=w,
        fundamentals=rng.normal(0.0, 0.3, size=S),
        terminal_cov=random_spd(rng, S, 0.15),
        walk_cov=random_spd(rng, S, 0.02),
        state_error_cov=random_spd(rng, S, 0.05),
        n_pollsters=n_pollsters,
        n_modes=n_modes,
        n_populations=n_populations,
        prior_scales=PriorScales(house=0.05, mode=0.04, population=0.04,
                                 sigma_state=0.05, sigma_national=0.04),
        hypothetical_slots=slots,
    )


def build_polls(spec, count, seed=2024, max_day=None):
    rng = np.random.default_rng(seed)
    max_day = max_day or spec.n_days
    polls = []
    for i in range(count):
        national = rng.uniform() < 0.3
        polls.append(PollObservation(
            poll_id=f"p{i:03d}",
            day=int(rng.integers(1, max_day + 1)),
            state=None if national else int(rng.integers(1, spec.n_states + 1)),
            y=int(rng.integers(100, 400)),
            n=int(rng.integers(500, 900)),
            pollster=int(rng.integers(0, spec.n_pollsters)),
            mode=int(rng.integers(0, spec.n_modes)),
            population=int(rng.integers(0, spec.n_populations)),
        ))
    return polls


@pytest.fixture(scope="session")
def small_spec():
    return build_spec()


@pytest.fixture(scope="session")
def small_polls(small_spec):
    return build_polls(small_spec, 8)


@pytest.fixture(scope="session")
def small_layout(small_spec, small_polls):
    return ParameterLayout.for_campaign(small_spec, len(small_polls))


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def random_params(layout, rng, scale=0.8):
    theta = rng.normal(0.0, scale, size=layout.dim)
    return ParameterVector(layout, theta)
