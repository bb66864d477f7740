class DimensionError(ValueError):
    """Array shapes are inconsistent with the declared dimensions."""


class ProtocolViolation(RuntimeError):
    """A neighbor packet is missing, duplicated, or from the wrong round."""


class SimulationDivergence(RuntimeError):
    """The plant state left its valid region.

    ``last_state`` holds the last finite state when one is available and
    ``partial`` any data recorded before the failure.
    """

    def __init__(self, message, last_state=None, partial=None):
        super().__init__(message)
        self.last_state = last_state
        self.partial = partial


class SolverFailure(RuntimeError):
    """A QP could not be solved to the requested tolerances."""

    def __init__(self, message, result=None, step_index=None):
        super().__init__(message)
        self.result = result
        self.step_index = step_index


class ConfigError(ValueError):
    """A scenario or command-line configuration is invalid."""
