"""Exception hierarchy shared by every module."""


class AgentSimError(Exception):
    pass


class ValidationError(AgentSimError):
    """A configuration or profile document failed validation.

    ``location`` points at the offending item (a dotted path or a line number)
    so the CLI can print a precise diagnostic.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class DomainError(AgentSimError, ValueError):
    """Argument outside the domain of a function (off-grid SMs, eta > 1, ...)."""


class ProtocolError(AgentSimError):
    """Internal state-machine violation; indicates a simulator bug."""


class InfeasibleSLOError(AgentSimError):
    """No allocation on the grid meets the decode-rate requirement."""


class DegenerateCapacityError(AgentSimError):
    """The prefill partition has zero capacity, so a ratio bound is undefined."""


class NoDataError(AgentSimError):
    """A metric was requested over an empty sample."""
