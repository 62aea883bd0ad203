"""Exception types shared across the package.

Domain errors on individual values (k > n, probabilities outside [0, 1], ...)
raise plain ``ValueError``; the classes below mark the two coarser failure
modes the CLI maps to distinct exit codes.
"""


class ConfigurationError(Exception):
    """Invalid parameter combination or test/protocol configuration."""


class DataError(Exception):
    """Malformed input file or record (CSV, score list, JSON config)."""


class SourceExhausted(Exception):
    """An agent data source cannot supply the requested batch."""


class ProtocolRunError(Exception):
    """A protocol run aborted mid-round; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
