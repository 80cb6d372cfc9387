"""Exception types raised across the package."""


class PushIdentError(Exception):
    """Base class for all package errors."""


class EmptyObject(PushIdentError):
    """Footprint rasterization produced no cells."""


class WorkspaceExceeded(PushIdentError):
    """An exploratory push moved the object off the workspace.

    Carries whatever the identification session had produced so far.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class PlanningFailed(PushIdentError):
    """RRT* found no path within its node budget."""


class NoStableGoal(PushIdentError):
    """No sampled goal pose satisfied overhang and stability requirements."""


class ExecutionDiverged(PushIdentError):
    """Closed-loop pushing stopped making progress toward its target."""
