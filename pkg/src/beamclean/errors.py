"""Exception types shared across the toolkit."""


class BeamcleanError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(BeamcleanError):
    """A caller supplied an invalid value (bad scale, epsilon out of range, ...)."""


class DataFormatError(BeamcleanError):
    """A file or payload violates one of the documented formats."""


class PriorProtocolError(BeamcleanError):
    """An external prior provider timed out or broke the wire protocol."""


class DecodeAborted(BeamcleanError):
    """Decoding stopped early; carries whatever was recovered so far.

    ``partial`` holds the AttackResult built from the steps completed
    before the failure (the trajectory up to the failing step).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
