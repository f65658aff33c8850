"""Exception hierarchy for calabiflow.

Every error raised by the package derives from CalabiFlowError so callers can
catch the whole family at the CLI boundary and map it to an exit code.
"""


class CalabiFlowError(Exception):
    """Base class for all calabiflow errors."""


class ClassViolationError(CalabiFlowError):
    """Cohomology class coefficients violate 0 < a < b."""


class ParameterError(CalabiFlowError):
    """A scalar parameter is outside its admissible range."""


class DomainError(CalabiFlowError):
    """A coordinate lies outside the truncated grid domain."""


class RangeError(CalabiFlowError):
    """A requested value is outside the numerically reachable range."""


class InvalidProfileError(CalabiFlowError):
    """A profile violates positivity/monotonicity needed by a formula."""


class TimeRangeError(CalabiFlowError):
    """A flow time lies outside [0, T)."""


class CollapseRegimeError(CalabiFlowError):
    """Initial class sits in a collapsing regime this package refuses to run."""


class StepFailureError(CalabiFlowError):
    """One implicit step failed to converge; the caller may retry smaller."""


class BlowUpError(CalabiFlowError):
    """The discrete solution left the admissible set before the stop time."""


class RootNotFoundError(CalabiFlowError):
    """Bracketed root search exhausted its search interval."""


class NumericalInconsistencyError(CalabiFlowError):
    """A quantity violates a structural bound, signalling evaluation trouble."""


class ParameterRegimeError(CalabiFlowError):
    """ODE integration entered a parameter regime without a forward orbit."""


class WindowError(CalabiFlowError):
    """A comparison window is empty after clipping to the available data."""


class SpacingError(CalabiFlowError):
    """Checkpoints are too far apart for a consistency check."""


class ArtifactError(CalabiFlowError):
    """An on-disk artifact is missing or malformed."""
