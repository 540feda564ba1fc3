"""Knob configuration: the full set of perturbation controls on a posterior.

A knob collects sparse overrides against the baseline model: prior
component overrides with powers, per-poll data transforms and powers, and
hypothetical polls with their own power.  The empty knob is the baseline
posterior itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import UsageError

#: Prior components, enumerated to match the model's factorization:
#: terminal anchor, random-walk increments, state errors, the three
#: bias-effect tables, the two measurement scales, and the poll errors.
PRIOR_COMPONENTS = (
    "terminal",
    "walk",
    "state_errors",
    "house",
    "mode",
    "population",
    "sigma_state",
    "sigma_national",
    "eps",
)

#: Components whose override is a replacement mean / covariance multiplier.
MVN_COMPONENTS = ("terminal", "walk", "state_errors")
#: Components whose override is a replacement prior scale.
SCALAR_SCALE_COMPONENTS = ("house", "mode", "population", "sigma_state", "sigma_national")


@dataclass(frozen=True)
class PriorOverride:
    """Override of one prior component: new hyperparameters and a power.

    ``loc`` replaces the terminal-anchor mean (terminal component only).
    ``cov_scale`` multiplies the component covariance (MVN components).
    ``scale`` replaces the prior scale (scalar-scale components).
    """

    power: float = 1.0
    loc: tuple[float, ...] | None = None
    cov_scale: float = 1.0
    scale: float | None = None

    def is_noop(self) -> bool:
        return self.power == 1.0 and self.loc is None and self.cov_scale == 1.0 and self.scale is None


@dataclass(frozen=True)
class LikelihoodOverride:
    """Override of one observed poll: transformed count and/or power."""

    y_value: float | None = None
    power: float = 1.0

    def is_noop(self) -> bool:
        return self.y_value is None and self.power == 1.0


@dataclass(frozen=True)
class HypotheticalPoll:
    """A poll that exists only inside a knob, with its own power.

    ``eps_slot`` indexes the reserved measurement-error slots (0-based,
    relative to the end of the observed polls), so the parameter space
    never changes along a perturbation path.  Counts may be real-valued.
    """

    day: int
    state: int | None
    y: float
    n: float
    pollster: int
    mode: int
    population: int
    eps_slot: int
    power: float = 1.0


@dataclass(frozen=True)
class Knob:
    """Sparse perturbation configuration relative to the baseline."""

    prior_overrides: dict[str, PriorOverride] = field(default_factory=dict)
    likelihood_overrides: dict[int, LikelihoodOverride] = field(default_factory=dict)
    hypothetical: tuple[HypotheticalPoll, ...] = ()

    @property
    def is_identity(self) -> bool:
        return not self.prior_overrides and not self.likelihood_overrides and not self.hypothetical


def identity_knob(spec=None) -> Knob:
    """The unperturbed configuration: all powers 1, nothing overridden."""
    return Knob()


def validate_knob(knob: Knob, spec, n_polls: int) -> None:
    """Check a knob against the model it will be applied to.

    Raises UsageError on the first inconsistency found.
    """
    for name, ov in knob.prior_overrides.items():
        if name not in PRIOR_COMPONENTS:
            raise UsageError(f"unknown prior component {name!r}")
        if not ov.power > 0:
            raise UsageError(f"prior power for {name!r} must be > 0, got {ov.power}")
        if ov.loc is not None:
            if name != "terminal":
                raise UsageError(f"location override only applies to 'terminal', not {name!r}")
            if len(ov.loc) != spec.n_states:
                raise UsageError(
                    f"terminal location override has length {len(ov.loc)}, expected {spec.n_states}")
        if ov.cov_scale != 1.0 and name not in MVN_COMPONENTS:
            raise UsageError(f"cov_scale override does not apply to component {name!r}")
        if not ov.cov_scale > 0:
            raise UsageError(f"cov_scale for {name!r} must be > 0, got {ov.cov_scale}")
        if ov.scale is not None:
            if name not in SCALAR_SCALE_COMPONENTS:
                raise UsageError(f"scale override does not apply to component {name!r}")
            if not ov.scale > 0:
                raise UsageError(f"scale for {name!r} must be > 0, got {ov.scale}")

    for idx, ov in knob.likelihood_overrides.items():
        if not 0 <= idx < n_polls:
            raise UsageError(f"likelihood override references poll index {idx}, have {n_polls} polls")
        if ov.power < 0:
            raise UsageError(f"likelihood power for poll {idx} must be >= 0, got {ov.power}")

    seen_slots = set()
    for hp in knob.hypothetical:
        if hp.power < 0:
            raise UsageError(f"hypothetical power must be >= 0, got {hp.power}")
        if not 1 <= hp.day <= spec.n_days:
            raise UsageError(f"hypothetical poll day {hp.day} outside [1, {spec.n_days}]")
        if hp.state is not None and not 1 <= hp.state <= spec.n_states:
            raise UsageError(f"hypothetical poll state {hp.state} outside [1, {spec.n_states}]")
        if not 0 <= hp.pollster < spec.n_pollsters:
            raise UsageError(f"hypothetical pollster index {hp.pollster} out of range")
        if not 0 <= hp.mode < spec.n_modes:
            raise UsageError(f"hypothetical mode index {hp.mode} out of range")
        if not 0 <= hp.population < spec.n_populations:
            raise UsageError(f"hypothetical population index {hp.population} out of range")
        if not 0 <= hp.eps_slot < spec.hypothetical_slots:
            raise UsageError(
                f"hypothetical eps slot {hp.eps_slot} outside reserved range "
                f"[0, {spec.hypothetical_slots})")
        if hp.eps_slot in seen_slots:
            raise UsageError(f"hypothetical eps slot {hp.eps_slot} used twice in one knob")
        seen_slots.add(hp.eps_slot)
        if hp.power > 0:
            if not 0 <= hp.y <= hp.n or hp.n <= 0:
                raise UsageError(f"hypothetical counts y={hp.y}, n={hp.n} invalid")
