"""Exception hierarchy shared by all stages of the workbench."""


class NtdError(Exception):
    """Base class; ``stage`` names the pipeline stage that raised."""

    stage = "unknown"

    def __init__(self, message, stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class DomainError(NtdError, ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateFrameError(DomainError):
    pass


class RecoveryFailedError(NtdError):
    pass


class InclusionNotInteriorError(DomainError):
    pass


class EmptyInclusionError(DomainError):
    pass


class NonflatAssumptionError(NtdError):
    """Boundary patch is flat; three tilted-normal probe points do not exist."""


class SearchFailedError(NtdError):
    pass


class ConvergenceError(NtdError):
    def __init__(self, message, history=(), stage="solver"):
        super().__init__(message, stage)
        self.history = list(history)


class SingularProblemError(NtdError):
    pass


class ResolutionError(DomainError):
    pass


class ExtractionFailedError(NtdError):
    pass


class ValidationError(NtdError):
    stage = "config"


def tag_stage(exc, stage):
    """Attach ``stage`` to ``exc`` unless a deeper stage was already recorded."""
    if getattr(exc, "stage", "unknown") == "unknown" or not isinstance(exc, NtdError):
        try:
            exc.stage = stage
        except AttributeError:
            pass
    return exc
