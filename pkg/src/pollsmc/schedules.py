"""Perturbation schedules: a mesh of levels with an evaluable knob at each.

Builders cover the supported perturbation families.  Knobs inside a
schedule are absolute (relative to the run's original baseline), so
chained segments compose by carrying the previous segment's terminal
knob as their base.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import UsageError
from .knobs import HypotheticalPoll, Knob, LikelihoodOverride, PriorOverride
from .model import ModelSpec, PollObservation, knob_log_h

FAMILIES = (
    "DATA_ARRIVAL",
    "HYPOTHETICAL_POLL",
    "PRIOR_LOCATION",
    "PRIOR_SCALE",
    "RW_SCALE",
    "DATA_VALUE",
    "POWER",
    "IDENTITY",
    "CHAIN",
)


@dataclass(frozen=True, eq=False)
class PerturbationSchedule:
    """Mesh 0 = u_0 < ... < u_L = 1 plus the knob at every mesh index.

    ``levels`` carries the family's human-facing level parameter per mesh
    index (shift magnitude, covariance factor, inserted sample size, ...)
    for reports and charts.  ``doc`` is the declarative builder document
    when the schedule came from one.
    """

    mesh: tuple[float, ...]
    knobs: tuple[Knob, ...]
    family: str
    label: str
    levels: tuple[float, ...]
    doc: dict | None = None

    def __post_init__(self):
        if len(self.mesh) < 2:
            raise UsageError("a schedule needs at least one step (L >= 1)")
        if len(self.knobs) != len(self.mesh) or len(self.levels) != len(self.mesh):
            raise UsageError("mesh, knobs and levels must have equal length")
        if self.mesh[0] != 0.0 or self.mesh[-1] != 1.0:
            raise UsageError("mesh endpoints must be exactly 0 and 1")
        if any(b <= a for a, b in zip(self.mesh, self.mesh[1:])):
            raise UsageError("mesh must be strictly increasing")
        if self.family not in FAMILIES:
            raise UsageError(f"unknown schedule family {self.family!r}")

    @property
    def steps(self) -> int:
        return len(self.mesh) - 1

    def knob_at(self, index: int) -> Knob:
        if not 0 <= index <= self.steps:
            raise UsageError(f"mesh index {index} outside [0, {self.steps}]")
        return self.knobs[index]

    @property
    def base_knob(self) -> Knob:
        return self.knobs[0]

    @property
    def terminal_knob(self) -> Knob:
        return self.knobs[-1]


def log_h(schedule: PerturbationSchedule, index: int, params, spec: ModelSpec,
          polls, layout=None):
    """log h at a mesh index: perturbed minus baseline, changed terms only."""
    knob = schedule.knob_at(index)
    return knob_log_h(spec, polls, knob, params, layout=layout)


def _linear_mesh(steps: int) -> tuple[float, ...]:
    if steps < 1:
        raise UsageError("mesh size must be >= 1")
    return tuple(np.linspace(0.0, 1.0, steps + 1).tolist())


def _next_slot(base: Knob) -> int:
    return max((hp.eps_slot for hp in base.hypothetical), default=-1) + 1


def _merge_prior(base: Knob, component: str, override: PriorOverride) -> Knob:
    if component in base.prior_overrides:
        raise UsageError(f"base knob already overrides prior component {component!r}")
    merged = dict(base.prior_overrides)
    if not override.is_noop():
        merged[component] = override
    return replace(base, prior_overrides=merged)


def identity_schedule(steps: int = 1, base: Knob | None = None) -> PerturbationSchedule:
    """A no-op path; every knob equals the base."""
    base = base if base is not None else Knob()
    mesh = _linear_mesh(steps)
    return PerturbationSchedule(
        mesh=mesh,
        knobs=(base,) * (steps + 1),
        family="IDENTITY",
        label="identity",
        levels=mesh,
        doc={"family": "identity", "mesh": steps},
    )


def schedule_data_arrival(new_polls, steps: int,
                          base: Knob | None = None,
                          label: str | None = None) -> PerturbationSchedule:
    """Gradual injection of new polls: the joint power ramps 0 -> 1."""
    if not new_polls:
        raise UsageError("data arrival needs at least one new poll")
    base = base if base is not None else Knob()
    mesh = _linear_mesh(steps)
    slot0 = _next_slot(base)
    entries = []
    for k, poll in enumerate(new_polls):
        entries.append(HypotheticalPoll(
            day=poll.day, state=poll.state, y=float(poll.y), n=float(poll.n),
            pollster=poll.pollster, mode=poll.mode, population=poll.population,
            eps_slot=slot0 + k,
        ))
    knobs = [base]
    for u in mesh[1:]:
        ramped = tuple(replace(e, power=u) for e in entries)
        knobs.append(replace(base, hypothetical=base.hypothetical + ramped))
    return PerturbationSchedule(
        mesh=mesh, knobs=tuple(knobs), family="DATA_ARRIVAL",
        label=label or f"insert {len(new_polls)} poll(s)",
        levels=mesh,
        doc={"family": "data_arrival", "mesh": steps,
             "polls": [_poll_doc(p) for p in new_polls]},
    )


def _poll_doc(poll) -> dict:
    return {
        "poll_id": getattr(poll, "poll_id", ""),
        "day": poll.day, "state": poll.state, "y": poll.y, "n": poll.n,
        "pollster": poll.pollster, "mode": poll.mode, "population": poll.population,
    }


def ramp_counts(y_start: float, n_start: float, y_end: float, n_end: float,
                steps: int) -> list[tuple[float, float]]:
    """(0,0) then a linear sample-size ramp at fixed support share."""
    if n_start <= 0 or n_end <= 0:
        raise UsageError("sample sizes along the ramp must be positive")
    r0, r1 = y_start / n_start, y_end / n_end
    if abs(r0 - r1) > 1e-12:
        raise UsageError(f"support share must stay fixed along the ramp ({r0} != {r1})")
    path = [(0.0, 0.0)]
    for k in range(1, steps + 1):
        frac = 1.0 if steps == 1 else (k - 1) / (steps - 1)
        n = n_start + (n_end - n_start) * frac
        path.append((r0 * n, n))
    return path


def schedule_hypothetical_poll(*, day: int, state: int | None, pollster: int,
                               mode: int, population: int,
                               count_path, base: Knob | None = None,
                               label: str | None = None,
                               doc: dict | None = None) -> PerturbationSchedule:
    """Insert one counterfactual poll whose size grows along the mesh."""
    base = base if base is not None else Knob()
    path = [(float(y), float(n)) for y, n in count_path]
    if len(path) < 2:
        raise UsageError("count path must cover the whole mesh (length L+1)")
    if path[0] != (0.0, 0.0):
        raise UsageError("count path must start absent: (0, 0) at mesh index 0")
    ratios = [y / n for y, n in path[1:] if n > 0]
    if any(abs(r - ratios[0]) > 1e-12 for r in ratios):
        raise UsageError("count path must keep a fixed support share")
    steps = len(path) - 1
    mesh = _linear_mesh(steps)
    slot = _next_slot(base)
    knobs = [base]
    for y, n in path[1:]:
        hp = HypotheticalPoll(day=day, state=state, y=y, n=n, pollster=pollster,
                              mode=mode, population=population, eps_slot=slot)
        knobs.append(replace(base, hypothetical=base.hypothetical + (hp,)))
    return PerturbationSchedule(
        mesh=mesh, knobs=tuple(knobs), family="HYPOTHETICAL_POLL",
        label=label or f"hypothetical poll day {day}",
        levels=tuple(n for _, n in path),
        doc=doc,
    )


def schedule_prior_location(spec: ModelSpec, state: int, shift: float, steps: int,
                            base: Knob | None = None,
                            label: str | None = None) -> PerturbationSchedule:
    """Shift the fundamentals anchor of one state linearly by up to ``shift``."""
    if not 1 <= state <= spec.n_states:
        raise UsageError(f"state index {state} outside [1, {spec.n_states}]")
    base = base if base is not None else Knob()
    mesh = _linear_mesh(steps)
    knobs = [base]
    levels = [0.0]
    f = np.asarray(spec.fundamentals)
    for u in mesh[1:]:
        a = u * shift
        levels.append(a)
        if a == 0.0:
            knobs.append(base)
            continue
        loc = f.copy()
        loc[state - 1] += a
        knobs.append(_merge_prior(base, "terminal", PriorOverride(loc=tuple(loc.tolist()))))
    return PerturbationSchedule(
        mesh=mesh, knobs=tuple(knobs), family="PRIOR_LOCATION",
        label=label or f"fundamentals shift {shift:+g} in {spec.state_label(state)}",
        levels=tuple(levels),
        doc={"family": "prior_location", "mesh": steps, "state": state, "shift": shift},
    )


def _scale_path(a_max: float, mesh) -> list[float]:
    if not a_max > 0:
        raise UsageError(f"scale factor must be positive, got {a_max}")
    # Geometric in the mesh position, so the reciprocal path mirrors exactly.
    return [float(a_max**u) for u in mesh]


def schedule_prior_scale(a_max: float, steps: int, base: Knob | None = None,
                         label: str | None = None) -> PerturbationSchedule:
    """Multiply the terminal-anchor covariance by a factor moving 1 -> a_max."""
    base = base if base is not None else Knob()
    mesh = _linear_mesh(steps)
    path = _scale_path(a_max, mesh)
    knobs = [base]
    for a in path[1:]:
        if a == 1.0:
            knobs.append(base)
        else:
            knobs.append(_merge_prior(base, "terminal", PriorOverride(cov_scale=a)))
    return PerturbationSchedule(
        mesh=mesh, knobs=tuple(knobs), family="PRIOR_SCALE",
        label=label or f"anchor covariance x{a_max:g}",
        levels=tuple(path),
        doc={"family": "prior_scale", "mesh": steps, "a_max": a_max},
    )


def schedule_rw_scale(a_max: float, steps: int, base: Knob | None = None,
                      label: str | None = None) -> PerturbationSchedule:
    """Multiply the random-walk covariance by a factor moving 1 -> a_max."""
    base = base if base is not None else Knob()
    mesh = _linear_mesh(steps)
    path = _scale_path(a_max, mesh)
    knobs = [base]
    for a in path[1:]:
        if a == 1.0:
            knobs.append(base)
        else:
            knobs.append(_merge_prior(base, "walk", PriorOverride(cov_scale=a)))
    return PerturbationSchedule(
        mesh=mesh, knobs=tuple(knobs), family="RW_SCALE",
        label=label or f"walk covariance x{a_max:g}",
        levels=tuple(path),
        doc={"family": "rw_scale", "mesh": steps, "a_max": a_max},
    )


def schedule_data_value(polls, poll_index: int, target_y: float, steps: int,
                        base: Knob | None = None,
                        label: str | None = None) -> PerturbationSchedule:
    """Interpolate one observed count toward a new value.

    The path is continuous: counts stay real-valued and the pmf is
    evaluated through log-Gamma, so no rounding kinks appear.
    """
    if not 0 <= poll_index < len(polls):
        raise UsageError(f"poll index {poll_index} out of range")
    poll = polls[poll_index]
    if not 0 < target_y < poll.n:
        raise UsageError(f"target count {target_y} outside (0, {poll.n})")
    base = base if base is not None else Knob()
    if poll_index in base.likelihood_overrides:
        raise UsageError(f"base knob already overrides poll index {poll_index}")
    mesh = _linear_mesh(steps)
    knobs = [base]
    levels = [float(poll.y)]
    for u in mesh[1:]:
        y = poll.y + u * (target_y - poll.y)
        levels.append(float(y))
        if y == poll.y:
            knobs.append(base)
            continue
        overrides = dict(base.likelihood_overrides)
        overrides[poll_index] = LikelihoodOverride(y_value=float(y))
        knobs.append(replace(base, likelihood_overrides=overrides))
    return PerturbationSchedule(
        mesh=mesh, knobs=tuple(knobs), family="DATA_VALUE",
        label=label or f"move poll {poll.poll_id} count {poll.y} -> {target_y:g}",
        levels=tuple(levels),
        doc={"family": "data_value", "mesh": steps, "poll_id": poll.poll_id,
             "target_y": target_y},
    )


def schedule_power(prior_paths: dict | None = None,
                   likelihood_paths: dict | None = None,
                   base: Knob | None = None,
                   label: str | None = None,
                   doc: dict | None = None) -> PerturbationSchedule:
    """Power-scale declared prior components and/or poll likelihoods.

    Paths are sequences over mesh indices 0..L; they must start at 1.
    Prior powers stay in (0, 1], likelihood powers in [0, 1].
    """
    prior_paths = dict(prior_paths or {})
    likelihood_paths = dict(likelihood_paths or {})
    if not prior_paths and not likelihood_paths:
        raise UsageError("power schedule needs at least one path")
    lengths = {len(p) for p in prior_paths.values()} | {len(p) for p in likelihood_paths.values()}
    if len(lengths) != 1:
        raise UsageError("all power paths must have equal length")
    length = lengths.pop()
    if length < 2:
        raise UsageError("power paths must cover the whole mesh (length L+1)")
    steps = length - 1
    for comp, path in prior_paths.items():
        if path[0] != 1.0:
            raise UsageError(f"prior power path for {comp!r} must start at 1")
        if any(not 0 < v <= 1 for v in path):
            raise UsageError(f"prior powers for {comp!r} must stay in (0, 1]")
    for idx, path in likelihood_paths.items():
        if path[0] != 1.0:
            raise UsageError(f"likelihood power path for poll {idx} must start at 1")
        if any(not 0 <= v <= 1 for v in path):
            raise UsageError(f"likelihood powers for poll {idx} must stay in [0, 1]")
    base = base if base is not None else Knob()
    mesh = _linear_mesh(steps)
    knobs = [base]
    for k in range(1, steps + 1):
        knob = base
        for comp, path in prior_paths.items():
            rho = float(path[k])
            if rho != 1.0:
                knob = _merge_prior(knob, comp, PriorOverride(power=rho))
        overrides = dict(knob.likelihood_overrides)
        for idx, path in likelihood_paths.items():
            gamma = float(path[k])
            if idx in base.likelihood_overrides:
                raise UsageError(f"base knob already overrides poll index {idx}")
            if gamma != 1.0:
                overrides[idx] = LikelihoodOverride(power=gamma)
        knob = replace(knob, likelihood_overrides=overrides)
        knobs.append(knob)
    return PerturbationSchedule(
        mesh=mesh, knobs=tuple(knobs), family="POWER",
        label=label or "power scaling",
        levels=mesh,
        doc=doc,
    )


def chain(*schedules: PerturbationSchedule, label: str | None = None) -> PerturbationSchedule:
    """Concatenate schedules end to end, re-indexed to a single [0, 1] mesh.

    Each junction requires the incoming terminal knob to equal the next
    schedule's base knob; segment widths are proportional to step counts.
    """
    if not schedules:
        raise UsageError("chain needs at least one schedule")
    if len(schedules) == 1:
        return schedules[0]
    for i, (left, right) in enumerate(zip(schedules, schedules[1:])):
        if left.terminal_knob != right.base_knob:
            raise UsageError(
                f"knob mismatch at junction {i}: terminal knob of segment {i} "
                f"differs from base knob of segment {i + 1}")
    total = sum(s.steps for s in schedules)
    mesh: list[float] = [0.0]
    knobs: list[Knob] = [schedules[0].base_knob]
    levels: list[float] = [schedules[0].levels[0]]
    offset = 0
    for s in schedules:
        width = s.steps / total
        start = offset / total
        for u, knob, level in zip(s.mesh[1:], s.knobs[1:], s.levels[1:]):
            mesh.append(start + u * width)
            knobs.append(knob)
            levels.append(level)
        offset += s.steps
    mesh[-1] = 1.0
    docs = [s.doc for s in schedules]
    doc = {"family": "chain", "parts": docs} if all(d is not None for d in docs) else None
    return PerturbationSchedule(
        mesh=tuple(mesh), knobs=tuple(knobs), family="CHAIN",
        label=label or " -> ".join(s.label for s in schedules),
        levels=tuple(levels),
        doc=doc,
    )


# ---------------------------------------------------------------------------
# Declarative documents -> builder calls
# ---------------------------------------------------------------------------

def _resolve_state(spec: ModelSpec, value) -> int | None:
    if value is None or value == "":
        return None
    if isinstance(value, str) and spec.state_names and value in spec.state_names:
        return spec.state_names.index(value) + 1
    try:
        idx = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"unknown state {value!r}") from None
    if not 1 <= idx <= spec.n_states:
        raise UsageError(f"state index {idx} outside [1, {spec.n_states}]")
    return idx


def _resolve_table(names: tuple[str, ...] | None, size: int, value, what: str) -> int:
    if isinstance(value, str) and names and value in names:
        return names.index(value)
    try:
        idx = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"unknown {what} {value!r}") from None
    if not 0 <= idx < size:
        raise UsageError(f"{what} index {idx} outside [0, {size})")
    return idx


def _resolve_poll_index(polls, poll_id) -> int:
    for i, poll in enumerate(polls):
        if poll.poll_id == str(poll_id):
            return i
    raise UsageError(f"poll id {poll_id!r} not found")


def _doc_poll(spec: ModelSpec, entry: dict, fallback_id: str) -> PollObservation:
    return PollObservation(
        poll_id=str(entry.get("poll_id") or fallback_id),
        day=int(entry["day"]),
        state=_resolve_state(spec, entry.get("state")),
        y=int(entry["y"]),
        n=int(entry["n"]),
        pollster=_resolve_table(spec.pollster_names, spec.n_pollsters,
                                entry["pollster"], "pollster"),
        mode=_resolve_table(spec.mode_names, spec.n_modes, entry["mode"], "mode"),
        population=_resolve_table(spec.population_names, spec.n_populations,
                                  entry["population"], "population"),
    )


def build_schedule(doc: dict | None, spec: ModelSpec, polls,
                   base: Knob | None = None) -> PerturbationSchedule:
    """Build a schedule from its declarative document."""
    if not doc:
        return identity_schedule(base=base)
    family = str(doc.get("family", "identity")).lower()
    steps = int(doc.get("mesh", 30))
    if family == "identity":
        return identity_schedule(steps=steps if "mesh" in doc else 1, base=base)
    if family == "data_arrival":
        new_polls = [_doc_poll(spec, entry, f"new{k:02d}")
                     for k, entry in enumerate(doc["polls"])]
        sched = schedule_data_arrival(new_polls, steps, base=base)
    elif family == "hypothetical_poll":
        y0, n0 = doc["start"]
        y1, n1 = doc["end"]
        sched = schedule_hypothetical_poll(
            day=int(doc["day"]),
            state=_resolve_state(spec, doc.get("state")),
            pollster=_resolve_table(spec.pollster_names, spec.n_pollsters,
                                    doc["pollster"], "pollster"),
            mode=_resolve_table(spec.mode_names, spec.n_modes, doc["mode"], "mode"),
            population=_resolve_table(spec.population_names, spec.n_populations,
                                      doc["population"], "population"),
            count_path=ramp_counts(float(y0), float(n0), float(y1), float(n1), steps),
            base=base,
        )
    elif family == "prior_location":
        sched = schedule_prior_location(spec, _resolve_state(spec, doc["state"]),
                                        float(doc["shift"]), steps, base=base)
    elif family == "prior_scale":
        sched = schedule_prior_scale(float(doc["a_max"]), steps, base=base)
    elif family == "rw_scale":
        sched = schedule_rw_scale(float(doc["a_max"]), steps, base=base)
    elif family == "data_value":
        sched = schedule_data_value(polls, _resolve_poll_index(polls, doc["poll_id"]),
                                    float(doc["target_y"]), steps, base=base)
    elif family == "power":
        prior_paths = {}
        for comp, spec_path in (doc.get("priors") or {}).items():
            prior_paths[str(comp)] = _power_path(spec_path, steps)
        likelihood_paths = {}
        for poll_id, spec_path in (doc.get("likelihoods") or {}).items():
            likelihood_paths[_resolve_poll_index(polls, poll_id)] = _power_path(spec_path, steps)
        sched = schedule_power(prior_paths, likelihood_paths, base=base)
    elif family == "chain":
        parts = []
        current = base if base is not None else Knob()
        for part_doc in doc["parts"]:
            part = build_schedule(part_doc, spec, polls, base=current)
            parts.append(part)
            current = part.terminal_knob
        sched = chain(*parts)
    else:
        raise UsageError(f"unknown schedule family {family!r}")
    if sched.doc is None or family in ("hypothetical_poll", "power"):
        object.__setattr__(sched, "doc", dict(doc))
    return sched


def _power_path(spec_path, steps: int) -> list[float]:
    if isinstance(spec_path, dict) and "to" in spec_path:
        target = float(spec_path["to"])
        return [1.0 + (target - 1.0) * k / steps for k in range(steps + 1)]
    if isinstance(spec_path, (list, tuple)):
        return [float(v) for v in spec_path]
    raise UsageError(f"power path must be a list or {{'to': value}}, got {spec_path!r}")
