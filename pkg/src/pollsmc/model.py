"""Poll-aggregation state-space model in unconstrained, non-centered form.

The model: poll counts are binomial with logit-scale success probability
built additively from a latent per-state support trajectory (a correlated
random walk anchored on a fundamentals-based forecast at the final day),
a correlated state error, bias effects (polling house, response mode,
surveyed population), and a poll-specific scaled error.

All evaluation runs on a flat unconstrained parameter vector; correlated
blocks are standardized innovations pushed through fixed Cholesky
factors.  Every reduction goes through non-optimized einsum or explicit
loops so that a particle's result is bit-identical whether it is
evaluated alone or inside a batch — the engine's determinism contract
relies on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln, log_expit

from .errors import ConfigurationError, DataError, EvaluationError, UsageError
from .knobs import Knob, validate_knob

LOG_2PI = math.log(2.0 * math.pi)
LOG_HALF_NORMAL_CONST = 0.5 * math.log(2.0 / math.pi)

NATIONAL = None  # sentinel for national-scope polls


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PollObservation:
    """One observed poll.

    ``day`` is 1-based in [1, T]; ``state`` is a 1-based state index or
    None for national polls; ``pollster``/``mode``/``population`` are
    0-based indices into the spec's bias-effect tables.
    """

    poll_id: str
    day: int
    state: int | None
    y: int
    n: int
    pollster: int
    mode: int
    population: int

    def __post_init__(self):
        if self.n <= 0:
            raise DataError(f"poll {self.poll_id}: respondent total n={self.n} must be positive")
        if not 0 <= self.y <= self.n:
            raise DataError(f"poll {self.poll_id}: y={self.y} outside [0, {self.n}]")
        if self.day < 1:
            raise DataError(f"poll {self.poll_id}: day={self.day} must be >= 1")


@dataclass(frozen=True)
class PriorScales:
    """Prior scales for the bias-effect tables and measurement scales."""

    house: float
    mode: float
    population: float
    sigma_state: float
    sigma_national: float

    def __post_init__(self):
        for name in ("house", "mode", "population", "sigma_state", "sigma_national"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"prior scale {name!r} must be positive")


def _spd_cholesky(mat: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mat, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigurationError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.allclose(arr, arr.T, rtol=0, atol=1e-12):
        raise ConfigurationError(f"{name} must be symmetric")
    try:
        return np.linalg.cholesky(arr)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"{name} is not positive definite") from exc


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Fixed model dimensions and hyperparameters.

    Immutable after construction; Cholesky factors are computed once and
    cached, so a spec can be shared freely across concurrent evaluations.
    """

    n_states: int
    n_days: int
    weights: np.ndarray          # (S,) nonnegative, sums to 1
    fundamentals: np.ndarray     # (S,) logit-scale terminal forecast
    terminal_cov: np.ndarray     # (S,S)
    walk_cov: np.ndarray         # (S,S)
    state_error_cov: np.ndarray  # (S,S)
    n_pollsters: int
    n_modes: int
    n_populations: int
    prior_scales: PriorScales
    hypothetical_slots: int = 8
    state_names: tuple[str, ...] | None = None
    pollster_names: tuple[str, ...] | None = None
    mode_names: tuple[str, ...] | None = None
    population_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_states < 1 or self.n_days < 1:
            raise ConfigurationError("n_states and n_days must be >= 1")
        for name in ("n_pollsters", "n_modes", "n_populations"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.hypothetical_slots < 0:
            raise ConfigurationError("hypothetical_slots must be >= 0")
        for attr, shape in (
            ("weights", (self.n_states,)),
            ("fundamentals", (self.n_states,)),
            ("terminal_cov", (self.n_states, self.n_states)),
            ("walk_cov", (self.n_states, self.n_states)),
            ("state_error_cov", (self.n_states, self.n_states)),
        ):
            arr = np.asarray(getattr(self, attr), dtype=float)
            if arr.shape != shape:
                raise ConfigurationError(f"{attr} has shape {arr.shape}, expected {shape}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        if np.any(self.weights < 0):
            raise ConfigurationError("weights must be nonnegative")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ConfigurationError("weights must sum to 1 within 1e-12")
        for names_attr, size_attr in (
            ("state_names", "n_states"),
            ("pollster_names", "n_pollsters"),
            ("mode_names", "n_modes"),
            ("population_names", "n_populations"),
        ):
            names = getattr(self, names_attr)
            if names is not None:
                names = tuple(str(x) for x in names)
                object.__setattr__(self, names_attr, names)
                if len(names) != getattr(self, size_attr):
                    raise ConfigurationError(
                        f"{names_attr} has {len(names)} entries, expected {getattr(self, size_attr)}")
        # Validate positive definiteness eagerly: fail at construction.
        _ = self.chol_terminal
        _ = self.chol_walk
        _ = self.chol_state_error

    @cached_property
    def chol_terminal(self) -> np.ndarray:
        return _spd_cholesky(self.terminal_cov, "terminal_cov")

    @cached_property
    def chol_walk(self) -> np.ndarray:
        return _spd_cholesky(self.walk_cov, "walk_cov")

    @cached_property
    def chol_state_error(self) -> np.ndarray:
        return _spd_cholesky(self.state_error_cov, "state_error_cov")

    @cached_property
    def logdet_terminal(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol_terminal))))

    @cached_property
    def logdet_walk(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol_walk))))

    @cached_property
    def logdet_state_error(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol_state_error))))

    def state_label(self, s: int) -> str:
        """Label for 1-based state index ``s``."""
        if self.state_names is not None:
            return self.state_names[s - 1]
        return f"S{s}"


@dataclass(frozen=True, eq=False)
class ParameterLayout:
    """Index layout of the flat unconstrained vector.

    Block order: z_T, z_walk (S x (T-1), row-major), z_u, house_raw,
    mode_raw, population_raw, log_sigma_state, log_sigma_national, eps.
    The eps block covers observed polls first, then reserved hypothetical
    slots, so the dimension is fixed for a whole campaign.
    """

    n_states: int
    n_days: int
    n_pollsters: int
    n_modes: int
    n_populations: int
    n_observed: int
    n_slots: int

    def __post_init__(self):
        S, T = self.n_states, self.n_days
        sizes = [
            ("z_T", S),
            ("z_walk", S * (T - 1)),
            ("z_u", S),
            ("house_raw", self.n_pollsters),
            ("mode_raw", self.n_modes),
            ("population_raw", self.n_populations),
            ("log_sigma_state", 1),
            ("log_sigma_national", 1),
            ("eps", self.n_observed + self.n_slots),
        ]
        offset = 0
        slices = {}
        for name, size in sizes:
            slices[name] = slice(offset, offset + size)
            offset += size
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "dim", offset)

    @classmethod
    def for_campaign(cls, spec: ModelSpec, n_observed: int) -> "ParameterLayout":
        return cls(
            n_states=spec.n_states,
            n_days=spec.n_days,
            n_pollsters=spec.n_pollsters,
            n_modes=spec.n_modes,
            n_populations=spec.n_populations,
            n_observed=n_observed,
            n_slots=spec.hypothetical_slots,
        )

    @property
    def n_eps(self) -> int:
        return self.n_observed + self.n_slots

    def matches_spec(self, spec: ModelSpec) -> bool:
        return (
            self.n_states == spec.n_states
            and self.n_days == spec.n_days
            and self.n_pollsters == spec.n_pollsters
            and self.n_modes == spec.n_modes
            and self.n_populations == spec.n_populations
        )

    def block(self, theta: np.ndarray, name: str) -> np.ndarray:
        """View of one named block; z_walk is reshaped to (..., S, T-1)."""
        view = theta[..., self.slices[name]]
        if name == "z_walk":
            view = view.reshape(theta.shape[:-1] + (self.n_states, self.n_days - 1))
        return view

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    def header(self) -> dict:
        """Self-describing block map for draws files."""
        S, T = self.n_states, self.n_days
        return {
            "blocks": [
                ["z_T", [S]],
                ["z_walk", [S, T - 1]],
                ["z_u", [S]],
                ["house_raw", [self.n_pollsters]],
                ["mode_raw", [self.n_modes]],
                ["population_raw", [self.n_populations]],
                ["log_sigma_state", []],
                ["log_sigma_national", []],
                ["eps", [self.n_eps]],
            ],
            "eps_observed": self.n_observed,
            "eps_slots": self.n_slots,
            "dim": self.dim,
        }

    @classmethod
    def from_header(cls, header: dict) -> "ParameterLayout":
        blocks = dict((name, shape) for name, shape in header["blocks"])
        S = blocks["z_T"][0]
        T = blocks["z_walk"][1] + 1 if blocks["z_walk"] else 2
        layout = cls(
            n_states=S,
            n_days=T,
            n_pollsters=blocks["house_raw"][0],
            n_modes=blocks["mode_raw"][0],
            n_populations=blocks["population_raw"][0],
            n_observed=int(header["eps_observed"]),
            n_slots=int(header["eps_slots"]),
        )
        if layout.dim != int(header["dim"]):
            raise ConfigurationError(
                f"draws header dim {header['dim']} does not match reconstructed layout dim {layout.dim}")
        return layout


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat unconstrained parameter vector plus its layout.

    Named blocks are exposed as views; the flat array is what samplers
    move around.
    """

    layout: ParameterLayout
    theta: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.theta, dtype=float)
        if arr.shape != (self.layout.dim,):
            raise ConfigurationError(
                f"parameter vector has shape {arr.shape}, layout dimension is {self.layout.dim}")
        object.__setattr__(self, "theta", arr)

    @classmethod
    def zeros(cls, layout: ParameterLayout) -> "ParameterVector":
        return cls(layout, layout.zeros())

    @property
    def z_T(self) -> np.ndarray:
        return self.layout.block(self.theta, "z_T")

    @property
    def z_walk(self) -> np.ndarray:
        return self.layout.block(self.theta, "z_walk")

    @property
    def z_u(self) -> np.ndarray:
        return self.layout.block(self.theta, "z_u")

    @property
    def house_raw(self) -> np.ndarray:
        return self.layout.block(self.theta, "house_raw")

    @property
    def mode_raw(self) -> np.ndarray:
        return self.layout.block(self.theta, "mode_raw")

    @property
    def population_raw(self) -> np.ndarray:
        return self.layout.block(self.theta, "population_raw")

    @property
    def log_sigma_state(self) -> float:
        return float(self.theta[self.layout.slices["log_sigma_state"]][0])

    @property
    def log_sigma_national(self) -> float:
        return float(self.theta[self.layout.slices["log_sigma_national"]][0])

    @property
    def eps(self) -> np.ndarray:
        return self.layout.block(self.theta, "eps")


@dataclass(frozen=True, eq=False)
class LatentState:
    """Constrained-space quantities implied by a parameter vector."""

    mu: np.ndarray            # (..., T, S) latent support, logit scale
    u: np.ndarray             # (..., S) state errors
    sigma_state: np.ndarray   # (...,)
    sigma_national: np.ndarray
    p: np.ndarray             # (..., N) per-poll success probabilities


@dataclass(frozen=True, eq=False)
class PollArrays:
    """Vectorized poll table used by the evaluation core.

    ``day_idx`` is 0-based; ``state_idx`` is 0-based with -1 for national
    polls; counts are floats so transformed (continuous) counts evaluate
    through the same path.
    """

    day_idx: np.ndarray
    state_idx: np.ndarray
    y: np.ndarray
    n: np.ndarray
    pollster: np.ndarray
    mode: np.ndarray
    population: np.ndarray
    eps_index: np.ndarray
    gamma: np.ndarray

    @property
    def count(self) -> int:
        return self.day_idx.shape[0]


def make_poll_arrays(spec: ModelSpec, polls, layout: ParameterLayout) -> PollArrays:
    """Validate observed polls against the spec and vectorize them."""
    if len(polls) != layout.n_observed:
        raise ConfigurationError(
            f"{len(polls)} polls given, layout reserves {layout.n_observed} observed slots")
    day = np.empty(len(polls), dtype=np.intp)
    state = np.empty(len(polls), dtype=np.intp)
    y = np.empty(len(polls))
    n = np.empty(len(polls))
    pollster = np.empty(len(polls), dtype=np.intp)
    mode = np.empty(len(polls), dtype=np.intp)
    population = np.empty(len(polls), dtype=np.intp)
    for i, poll in enumerate(polls):
        if not 1 <= poll.day <= spec.n_days:
            raise DataError(f"poll {poll.poll_id}: day {poll.day} outside [1, {spec.n_days}]")
        if poll.state is not None and not 1 <= poll.state <= spec.n_states:
            raise DataError(f"poll {poll.poll_id}: state {poll.state} outside [1, {spec.n_states}]")
        if not 0 <= poll.pollster < spec.n_pollsters:
            raise DataError(f"poll {poll.poll_id}: pollster index {poll.pollster} out of range")
        if not 0 <= poll.mode < spec.n_modes:
            raise DataError(f"poll {poll.poll_id}: mode index {poll.mode} out of range")
        if not 0 <= poll.population < spec.n_populations:
            raise DataError(f"poll {poll.poll_id}: population index {poll.population} out of range")
        day[i] = poll.day - 1
        state[i] = -1 if poll.state is None else poll.state - 1
        y[i] = poll.y
        n[i] = poll.n
        pollster[i] = poll.pollster
        mode[i] = poll.mode
        population[i] = poll.population
    return PollArrays(
        day_idx=day, state_idx=state, y=y, n=n,
        pollster=pollster, mode=mode, population=population,
        eps_index=np.arange(len(polls), dtype=np.intp),
        gamma=np.ones(len(polls)),
    )


# ---------------------------------------------------------------------------
# Evaluation core (batched over a leading particle axis)
# ---------------------------------------------------------------------------

def _as_matrix(theta: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(theta, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise UsageError(f"theta must be 1-D or 2-D, got ndim={arr.ndim}")


def _latent_block(spec: ModelSpec, layout: ParameterLayout, theta2d: np.ndarray):
    """Reconstruct (mu, u, sigma_state, sigma_national) for a particle block."""
    S, T = spec.n_states, spec.n_days
    R = theta2d.shape[0]
    z_T = layout.block(theta2d, "z_T")
    z_walk = layout.block(theta2d, "z_walk")
    z_u = layout.block(theta2d, "z_u")

    mu = np.empty((R, T, S))
    mu[:, T - 1, :] = spec.fundamentals + np.einsum("ij,rj->ri", spec.chol_terminal, z_T)
    if T > 1:
        steps = np.einsum("ij,rjt->rit", spec.chol_walk, z_walk)
        for t in range(T - 2, -1, -1):
            mu[:, t, :] = mu[:, t + 1, :] + steps[:, :, t]
    u = np.einsum("ij,rj->ri", spec.chol_state_error, z_u)
    sigma_state = np.exp(theta2d[:, layout.slices["log_sigma_state"]][:, 0])
    sigma_national = np.exp(theta2d[:, layout.slices["log_sigma_national"]][:, 0])
    return mu, u, sigma_state, sigma_national


def _poll_linear_predictor(spec, layout, theta2d, mu, u, sigma_state, sigma_national,
                           rows: PollArrays) -> np.ndarray:
    """logit(p) for each (particle, poll-row) pair."""
    R = theta2d.shape[0]
    M = rows.count
    zeta = np.empty((R, M))
    is_state = rows.state_idx >= 0
    if np.any(is_state):
        d = rows.day_idx[is_state]
        s = rows.state_idx[is_state]
        zeta[:, is_state] = mu[:, d, s] + u[:, s]
    if not np.all(is_state):
        nat = ~is_state
        mu_day = mu[:, rows.day_idx[nat], :] + u[:, None, :]
        zeta[:, nat] = np.einsum("rms,s->rm", mu_day, spec.weights)

    scales = spec.prior_scales
    house = scales.house * layout.block(theta2d, "house_raw")
    mode = scales.mode * layout.block(theta2d, "mode_raw")
    population = scales.population * layout.block(theta2d, "population_raw")
    zeta += house[:, rows.pollster] + mode[:, rows.mode] + population[:, rows.population]

    eps = layout.block(theta2d, "eps")[:, rows.eps_index]
    sigma_row = np.where(is_state[None, :], sigma_state[:, None], sigma_national[:, None])
    zeta += sigma_row * eps
    return zeta


def _binom_logpmf(y, n, zeta):
    """Binomial log pmf at real-valued counts, full coefficient included."""
    coeff = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
    return coeff + y * log_expit(zeta) + (n - y) * log_expit(-zeta)


def _log_prior_core(spec: ModelSpec, layout: ParameterLayout, theta2d: np.ndarray,
                    want_grad: bool):
    """Baseline log prior (standard normals + half-normal scales, with Jacobian)."""
    a = layout.slices["log_sigma_state"].start
    b = layout.slices["log_sigma_national"].stop
    sumsq = (np.sum(theta2d[:, :a] * theta2d[:, :a], axis=1)
             + np.sum(theta2d[:, b:] * theta2d[:, b:], axis=1))
    n_std = layout.dim - 2
    val = -0.5 * sumsq - 0.5 * n_std * LOG_2PI

    scales = spec.prior_scales
    x_s = theta2d[:, a]
    x_n = theta2d[:, b - 1]
    for x, s in ((x_s, scales.sigma_state), (x_n, scales.sigma_national)):
        sigma_sq = np.exp(2.0 * x)
        val = val + (LOG_HALF_NORMAL_CONST - math.log(s) - sigma_sq / (2.0 * s * s) + x)

    if not want_grad:
        return val, None
    grad = -theta2d.copy()
    grad[:, a] = -np.exp(2.0 * x_s) / (scales.sigma_state ** 2) + 1.0
    grad[:, b - 1] = -np.exp(2.0 * x_n) / (scales.sigma_national ** 2) + 1.0
    return val, grad


def _mvn_block_terms(theta_block_sq_sum, n_factors, S, logdet, cov_scale, power):
    """rho * sum_t log MVN(.|., a*Cov) for a whitened block, minus baseline."""
    base = n_factors * (-0.5 * S * LOG_2PI - 0.5 * logdet) - 0.5 * theta_block_sq_sum
    pert = (n_factors * (-0.5 * S * LOG_2PI - 0.5 * (logdet + S * math.log(cov_scale)))
            - theta_block_sq_sum / (2.0 * cov_scale))
    return power * pert - base


def _prior_override_terms(spec, layout, theta2d, overrides: dict,
                          grad: np.ndarray | None):
    """Sum of (rho * log p_phi' - log p_phi) over overridden prior components.

    When ``grad`` is given, the corresponding gradient terms are added in
    place.
    """
    if not overrides:
        return np.zeros(theta2d.shape[0])
    S = spec.n_states
    T = spec.n_days
    scales = spec.prior_scales
    val = np.zeros(theta2d.shape[0])

    for name, ov in overrides.items():
        rho = ov.power
        if name == "terminal":
            z = layout.block(theta2d, "z_T")
            if ov.loc is not None:
                delta = np.asarray(ov.loc, dtype=float) - spec.fundamentals
                d = solve_triangular(spec.chol_terminal, delta, lower=True)
            else:
                d = np.zeros(S)
            v = z - d
            vsq = np.sum(v * v, axis=1)
            zsq = np.sum(z * z, axis=1)
            a = ov.cov_scale
            pert = -0.5 * S * LOG_2PI - 0.5 * (spec.logdet_terminal + S * math.log(a)) - vsq / (2 * a)
            base = -0.5 * S * LOG_2PI - 0.5 * spec.logdet_terminal - 0.5 * zsq
            val += rho * pert - base
            if grad is not None:
                g = layout.block(grad, "z_T")
                g += -rho * v / a + z
        elif name == "walk":
            z = layout.block(theta2d, "z_walk")
            zsq = np.sum(z * z, axis=(1, 2))
            val += _mvn_block_terms(zsq, T - 1, S, spec.logdet_walk, ov.cov_scale, rho)
            if grad is not None:
                g = layout.block(grad, "z_walk")
                g += -rho * z / ov.cov_scale + z
        elif name == "state_errors":
            z = layout.block(theta2d, "z_u")
            zsq = np.sum(z * z, axis=1)
            val += _mvn_block_terms(zsq, 1, S, spec.logdet_state_error, ov.cov_scale, rho)
            if grad is not None:
                g = layout.block(grad, "z_u")
                g += -rho * z / ov.cov_scale + z
        elif name in ("house", "mode", "population"):
            block = {"house": "house_raw", "mode": "mode_raw", "population": "population_raw"}[name]
            s_base = getattr(scales, name)
            s_new = ov.scale if ov.scale is not None else s_base
            ratio_sq = (s_base / s_new) ** 2
            raw = layout.block(theta2d, block)
            J = raw.shape[1]
            rsq = np.sum(raw * raw, axis=1)
            # Densities of the effects s_base*raw under the new and old
            # scales; the fixed non-centering Jacobian cancels in the ratio.
            pert = -0.5 * J * LOG_2PI - J * math.log(s_new) - 0.5 * ratio_sq * rsq
            base = -0.5 * J * LOG_2PI - J * math.log(s_base) - 0.5 * rsq
            val += rho * pert - base
            if grad is not None:
                g = layout.block(grad, block)
                g += -rho * ratio_sq * raw + raw
        elif name in ("sigma_state", "sigma_national"):
            sl = layout.slices["log_sigma_state" if name == "sigma_state" else "log_sigma_national"]
            x = theta2d[:, sl.start]
            s_base = getattr(scales, name)
            s_new = ov.scale if ov.scale is not None else s_base
            sigma_sq = np.exp(2.0 * x)
            pert = LOG_HALF_NORMAL_CONST - math.log(s_new) - sigma_sq / (2 * s_new * s_new)
            base = LOG_HALF_NORMAL_CONST - math.log(s_base) - sigma_sq / (2 * s_base * s_base)
            val += rho * pert - base
            if grad is not None:
                grad[:, sl.start] += -rho * sigma_sq / (s_new * s_new) + sigma_sq / (s_base * s_base)
        elif name == "eps":
            eps = layout.block(theta2d, "eps")
            N = eps.shape[1]
            esq = np.sum(eps * eps, axis=1)
            val += (rho - 1.0) * (-0.5 * N * LOG_2PI - 0.5 * esq)
            if grad is not None:
                g = layout.block(grad, "eps")
                g += -(rho - 1.0) * eps
        else:
            raise UsageError(f"unknown prior component {name!r}")
    return val


def _accumulate_likelihood_grad(spec, layout, theta2d, rows, coeff, mu, u,
                                sigma_state, sigma_national, grad):
    """Backpropagate per-(particle,row) coefficients d(loglik)/d(zeta) into grad."""
    S, T = spec.n_states, spec.n_days
    R = theta2d.shape[0]
    scales = spec.prior_scales
    G = np.zeros((R, T, S))
    g_u = np.zeros((R, S))
    g_house = layout.block(grad, "house_raw")
    g_mode = layout.block(grad, "mode_raw")
    g_pop = layout.block(grad, "population_raw")
    g_eps = layout.block(grad, "eps")
    eps = layout.block(theta2d, "eps")
    a_state = layout.slices["log_sigma_state"].start
    a_nat = layout.slices["log_sigma_national"].start

    for j in range(rows.count):
        c = coeff[:, j]
        d = rows.day_idx[j]
        s = rows.state_idx[j]
        if s >= 0:
            G[:, d, s] += c
            g_u[:, s] += c
            sig = sigma_state
            x_col = a_state
        else:
            G[:, d, :] += c[:, None] * spec.weights
            g_u += c[:, None] * spec.weights
            sig = sigma_national
            x_col = a_nat
        g_house[:, rows.pollster[j]] += scales.house * c
        g_mode[:, rows.mode[j]] += scales.mode * c
        g_pop[:, rows.population[j]] += scales.population * c
        e = eps[:, rows.eps_index[j]]
        g_eps[:, rows.eps_index[j]] += sig * c
        grad[:, x_col] += c * sig * e

    g_zT = layout.block(grad, "z_T")
    g_zT += np.einsum("rti,ik->rk", G, spec.chol_terminal)
    if T > 1:
        cumG = np.cumsum(G, axis=1)[:, : T - 1, :]
        g_zw = layout.block(grad, "z_walk")
        g_zw += np.einsum("rki,ij->rjk", cumG, spec.chol_walk)
    g_zu = layout.block(grad, "z_u")
    g_zu += np.einsum("ri,ij->rj", g_u, spec.chol_state_error)


def _likelihood_core(spec, layout, theta2d, rows: PollArrays, want_grad: bool,
                     grad: np.ndarray | None = None):
    """Powered binomial log likelihood over a poll-row table (gamma > 0 rows)."""
    R = theta2d.shape[0]
    if rows.count == 0:
        return np.zeros(R)
    mu, u, sigma_state, sigma_national = _latent_block(spec, layout, theta2d)
    zeta = _poll_linear_predictor(spec, layout, theta2d, mu, u,
                                  sigma_state, sigma_national, rows)
    logpmf = _binom_logpmf(rows.y, rows.n, zeta)
    val = np.einsum("rm,m->r", logpmf, rows.gamma)
    if want_grad:
        p = expit(zeta)
        coeff = rows.gamma * (rows.y - rows.n * p)
        _accumulate_likelihood_grad(spec, layout, theta2d, rows, coeff, mu, u,
                                    sigma_state, sigma_national, grad)
    return val


def _filter_rows(rows: PollArrays, keep: np.ndarray) -> PollArrays:
    return PollArrays(
        day_idx=rows.day_idx[keep], state_idx=rows.state_idx[keep],
        y=rows.y[keep], n=rows.n[keep],
        pollster=rows.pollster[keep], mode=rows.mode[keep],
        population=rows.population[keep], eps_index=rows.eps_index[keep],
        gamma=rows.gamma[keep],
    )


def effective_rows(spec: ModelSpec, base: PollArrays, knob: Knob,
                   layout: ParameterLayout) -> PollArrays:
    """Poll table with knob overrides applied and hypothetical polls appended.

    Rows whose power is 0 are dropped: they contribute exactly nothing to
    value or gradient.
    """
    y = base.y.copy()
    gamma = base.gamma.copy()
    for idx, ov in knob.likelihood_overrides.items():
        if ov.y_value is not None:
            if not 0.0 < ov.y_value < base.n[idx]:
                raise UsageError(
                    f"transformed count {ov.y_value} for poll index {idx} outside (0, {base.n[idx]})")
            y[idx] = ov.y_value
        gamma[idx] = ov.power

    extra = [hp for hp in knob.hypothetical if hp.power > 0]
    if extra:
        slot_base = layout.n_observed
        day = np.concatenate([base.day_idx, [hp.day - 1 for hp in extra]]).astype(np.intp)
        state = np.concatenate(
            [base.state_idx, [-1 if hp.state is None else hp.state - 1 for hp in extra]]
        ).astype(np.intp)
        y = np.concatenate([y, [hp.y for hp in extra]])
        n = np.concatenate([base.n, [hp.n for hp in extra]])
        pollster = np.concatenate([base.pollster, [hp.pollster for hp in extra]]).astype(np.intp)
        mode = np.concatenate([base.mode, [hp.mode for hp in extra]]).astype(np.intp)
        population = np.concatenate([base.population, [hp.population for hp in extra]]).astype(np.intp)
        eps_index = np.concatenate(
            [base.eps_index, [slot_base + hp.eps_slot for hp in extra]]
        ).astype(np.intp)
        gamma = np.concatenate([gamma, [hp.power for hp in extra]])
        rows = PollArrays(day, state, y, n, pollster, mode, population, eps_index, gamma)
    else:
        rows = PollArrays(base.day_idx, base.state_idx, y, base.n, base.pollster,
                          base.mode, base.population, base.eps_index, gamma)
    return _filter_rows(rows, rows.gamma > 0)


@dataclass(frozen=True, eq=False)
class DeltaRows:
    """Likelihood terms that differ from baseline, with old and new (y, gamma)."""

    rows: PollArrays          # gamma field unused here
    y_new: np.ndarray
    gamma_new: np.ndarray
    y_old: np.ndarray
    gamma_old: np.ndarray


def delta_rows(spec: ModelSpec, base: PollArrays, knob: Knob,
               layout: ParameterLayout) -> DeltaRows | None:
    """Only the likelihood terms the knob changes (sparse log-h support)."""
    idxs = sorted(knob.likelihood_overrides)
    extra = list(knob.hypothetical)
    m = len(idxs) + len(extra)
    if m == 0:
        return None
    day = np.empty(m, dtype=np.intp)
    state = np.empty(m, dtype=np.intp)
    n = np.empty(m)
    pollster = np.empty(m, dtype=np.intp)
    mode = np.empty(m, dtype=np.intp)
    population = np.empty(m, dtype=np.intp)
    eps_index = np.empty(m, dtype=np.intp)
    y_new = np.empty(m)
    g_new = np.empty(m)
    y_old = np.empty(m)
    g_old = np.empty(m)
    for k, idx in enumerate(idxs):
        ov = knob.likelihood_overrides[idx]
        day[k] = base.day_idx[idx]
        state[k] = base.state_idx[idx]
        n[k] = base.n[idx]
        pollster[k] = base.pollster[idx]
        mode[k] = base.mode[idx]
        population[k] = base.population[idx]
        eps_index[k] = base.eps_index[idx]
        y_val = ov.y_value if ov.y_value is not None else base.y[idx]
        if ov.y_value is not None and ov.power > 0 and not 0.0 < ov.y_value < base.n[idx]:
            raise UsageError(
                f"transformed count {ov.y_value} for poll index {idx} outside (0, {base.n[idx]})")
        y_new[k] = y_val
        g_new[k] = ov.power
        y_old[k] = base.y[idx]
        g_old[k] = base.gamma[idx]
    slot_base = layout.n_observed
    for k, hp in enumerate(extra, start=len(idxs)):
        day[k] = hp.day - 1
        state[k] = -1 if hp.state is None else hp.state - 1
        n[k] = hp.n if hp.n > 0 else 1.0
        pollster[k] = hp.pollster
        mode[k] = hp.mode
        population[k] = hp.population
        eps_index[k] = slot_base + hp.eps_slot
        y_new[k] = hp.y
        g_new[k] = hp.power
        y_old[k] = 0.0
        g_old[k] = 0.0
    rows = PollArrays(day, state, y_new, n, pollster, mode, population, eps_index,
                      np.ones(m))
    return DeltaRows(rows=rows, y_new=y_new, gamma_new=g_new, y_old=y_old, gamma_old=g_old)


def _log_h_core(spec, layout, theta2d, knob: Knob, base: PollArrays) -> np.ndarray:
    """log h(theta): perturbed minus baseline log density, changed terms only."""
    val = _prior_override_terms(spec, layout, theta2d, knob.prior_overrides, None)
    deltas = delta_rows(spec, base, knob, layout)
    if deltas is not None:
        mu, u, s_s, s_n = _latent_block(spec, layout, theta2d)
        zeta = _poll_linear_predictor(spec, layout, theta2d, mu, u, s_s, s_n, deltas.rows)
        pmf_new = _binom_logpmf(deltas.y_new, deltas.rows.n, zeta)
        new_term = np.where(deltas.gamma_new > 0, deltas.gamma_new * pmf_new, 0.0)
        pmf_old = _binom_logpmf(deltas.y_old, deltas.rows.n, zeta)
        old_term = np.where(deltas.gamma_old > 0, deltas.gamma_old * pmf_old, 0.0)
        val = val + np.einsum("rm->r", new_term - old_term)
    return val


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def _coerce(params) -> tuple[ParameterLayout, np.ndarray]:
    if isinstance(params, ParameterVector):
        return params.layout, params.theta
    raise UsageError("params must be a ParameterVector")


def _check_finite_input(theta: np.ndarray):
    if not np.all(np.isfinite(theta)):
        raise EvaluationError("parameter vector contains non-finite entries", component="theta")


def transform(params: ParameterVector, spec: ModelSpec, polls) -> LatentState:
    """Map unconstrained parameters to the constrained latent state.

    The terminal day carries the fundamentals anchor; earlier days stack
    correlated walk innovations backward from it.
    """
    layout, theta = _coerce(params)
    if not layout.matches_spec(spec):
        raise ConfigurationError("parameter layout does not match the model spec")
    _check_finite_input(theta)
    rows = make_poll_arrays(spec, polls, layout)
    theta2d = theta[None, :]
    mu, u, sigma_state, sigma_national = _latent_block(spec, layout, theta2d)
    for arr, name in ((mu, "mu"), (u, "u")):
        if not np.all(np.isfinite(arr)):
            raise EvaluationError(f"non-finite values in {name}", component=name)
    if rows.count:
        zeta = _poll_linear_predictor(spec, layout, theta2d, mu, u,
                                      sigma_state, sigma_national, rows)
        if not np.all(np.isfinite(zeta)):
            raise EvaluationError("non-finite poll linear predictor", component="p")
        p = expit(zeta)[0]
    else:
        p = np.zeros(0)
    return LatentState(
        mu=mu[0], u=u[0],
        sigma_state=sigma_state[0], sigma_national=sigma_national[0],
        p=p,
    )


def log_prior(params: ParameterVector, spec: ModelSpec) -> float:
    """Log prior in the unconstrained space, Jacobian terms included."""
    layout, theta = _coerce(params)
    _check_finite_input(theta)
    val, _ = _log_prior_core(spec, layout, theta[None, :], want_grad=False)
    return float(val[0])


def log_likelihood(params: ParameterVector, spec: ModelSpec, polls,
                   weights=None) -> float:
    """Sum of gamma-powered binomial log pmfs over observed polls."""
    layout, theta = _coerce(params)
    _check_finite_input(theta)
    rows = make_poll_arrays(spec, polls, layout)
    if weights is not None:
        gamma = np.asarray(weights, dtype=float)
        if gamma.shape != (rows.count,):
            raise UsageError(f"weights must have shape ({rows.count},), got {gamma.shape}")
        if np.any(gamma < 0):
            raise UsageError("likelihood powers must be nonnegative")
        rows = PollArrays(rows.day_idx, rows.state_idx, rows.y, rows.n, rows.pollster,
                          rows.mode, rows.population, rows.eps_index, gamma)
    rows = _filter_rows(rows, rows.gamma > 0)
    val = _likelihood_core(spec, layout, theta[None, :], rows, want_grad=False)
    return float(val[0])


def knob_log_h(spec: ModelSpec, polls, knob: Knob, params,
               layout: ParameterLayout | None = None) -> float | np.ndarray:
    """log h(theta) for a knob: perturbed minus baseline, changed terms only.

    ``params`` may be a ParameterVector (returns a float) or an (R, dim)
    matrix (returns an (R,) vector).
    """
    if isinstance(params, ParameterVector):
        layout = params.layout
        theta2d, single = params.theta[None, :], True
    else:
        if layout is None:
            raise UsageError("layout required when passing a raw parameter matrix")
        theta2d, single = _as_matrix(params)
    validate_knob(knob, spec, n_polls=layout.n_observed)
    if knob.is_identity:
        out = np.zeros(theta2d.shape[0])
    else:
        base = make_poll_arrays(spec, polls, layout)
        out = _log_h_core(spec, layout, theta2d, knob, base)
    return float(out[0]) if single else out


def log_posterior_unnorm(params: ParameterVector, spec: ModelSpec, polls,
                         knob: Knob | None = None) -> float:
    """Unnormalized log posterior under a knob (identity knob = baseline)."""
    layout, theta = _coerce(params)
    _check_finite_input(theta)
    knob = knob if knob is not None else Knob()
    validate_knob(knob, spec, n_polls=layout.n_observed)
    base = make_poll_arrays(spec, polls, layout)
    theta2d = theta[None, :]
    val, _ = _log_prior_core(spec, layout, theta2d, want_grad=False)
    rows = effective_rows(spec, base, knob, layout)
    val = val + _likelihood_core(spec, layout, theta2d, rows, want_grad=False)
    val = val + _prior_override_terms(spec, layout, theta2d, knob.prior_overrides, None)
    return float(val[0])


def grad_log_posterior(params: ParameterVector, spec: ModelSpec, polls,
                       knob: Knob | None = None) -> np.ndarray:
    """Exact gradient of log_posterior_unnorm with respect to every coordinate."""
    layout, theta = _coerce(params)
    target = PosteriorTarget.build(spec, polls, knob if knob is not None else Knob(), layout)
    _, grad = target.value_and_grad(theta)
    return grad


@dataclass(frozen=True, eq=False)
class PosteriorTarget:
    """Reusable handle on a knob's unnormalized log density and gradient.

    Assembles the effective poll table once; evaluations are pure and
    safe to call concurrently (single vectors or particle blocks).
    """

    spec: ModelSpec
    layout: ParameterLayout
    knob: Knob
    rows: PollArrays

    @classmethod
    def build(cls, spec: ModelSpec, polls, knob: Knob,
              layout: ParameterLayout | None = None) -> "PosteriorTarget":
        if layout is None:
            layout = ParameterLayout.for_campaign(spec, len(polls))
        validate_knob(knob, spec, n_polls=layout.n_observed)
        base = make_poll_arrays(spec, polls, layout)
        rows = effective_rows(spec, base, knob, layout)
        return cls(spec=spec, layout=layout, knob=knob, rows=rows)

    def batch_value(self, theta2d: np.ndarray) -> np.ndarray:
        theta2d, _ = _as_matrix(theta2d)
        val, _ = _log_prior_core(self.spec, self.layout, theta2d, want_grad=False)
        val = val + _likelihood_core(self.spec, self.layout, theta2d, self.rows,
                                     want_grad=False)
        val = val + _prior_override_terms(self.spec, self.layout, theta2d,
                                          self.knob.prior_overrides, None)
        return val

    def batch_value_and_grad(self, theta2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta2d, _ = _as_matrix(theta2d)
        val, grad = _log_prior_core(self.spec, self.layout, theta2d, want_grad=True)
        val = val + _likelihood_core(self.spec, self.layout, theta2d, self.rows,
                                     want_grad=True, grad=grad)
        val = val + _prior_override_terms(self.spec, self.layout, theta2d,
                                          self.knob.prior_overrides, grad)
        return val, grad

    def value(self, theta: np.ndarray) -> float:
        return float(self.batch_value(np.asarray(theta)[None, :])[0])

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        val, grad = self.batch_value_and_grad(np.asarray(theta)[None, :])
        return float(val[0]), grad[0]

    @property
    def dim(self) -> int:
        return self.layout.dim
