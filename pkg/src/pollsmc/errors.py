"""Exception types shared across the package."""


class PollsmcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PollsmcError):
    """Inconsistent dimensions or invalid model/engine configuration."""


class DataError(PollsmcError):
    """Invalid observed data (e.g. y outside [0, n])."""


class EvaluationError(PollsmcError):
    """Non-finite value produced during density/gradient evaluation.

    ``component`` names the offending quantity (e.g. ``"mu"``, ``"p"``).
    """

    def __init__(self, message: str, component: str | None = None):
        super().__init__(message)
        self.component = component


class UsageError(PollsmcError):
    """Caller misuse: bad index, malformed arguments, unknown identifier."""


class SchemaError(PollsmcError):
    """File failed schema validation; names file, line and field."""

    def __init__(self, message: str, *, path: str | None = None,
                 line: int | None = None, field: str | None = None):
        loc = path or "<input>"
        if line is not None:
            loc += f":{line}"
        if field:
            loc += f" (field {field!r})"
        super().__init__(f"{loc}: {message}")
        self.path = path
        self.line = line
        self.field = field


class DegenerateWeightsError(PollsmcError):
    """All particle weights vanished; a finer mesh is needed."""


class StepError(PollsmcError):
    """A sampler step failed; carries the step index and flagged particles."""

    def __init__(self, message: str, *, step: int, particle_indices=()):
        super().__init__(message)
        self.step = step
        self.particle_indices = tuple(particle_indices)
