"""Exception types shared across the pipeline stages."""


class AttraktError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 1


class DomainError(AttraktError, ValueError):
    """An argument lies outside the domain of an operation."""


class FormatError(AttraktError, ValueError):
    """A persisted artifact is malformed or truncated."""


class GateError(AttraktError):
    exit_code = 10


class InjectivityError(AttraktError):
    exit_code = 11


class BetaLadderError(AttraktError):
    exit_code = 12


class SettlingError(AttraktError):
    exit_code = 13


class IntegratorError(AttraktError):
    exit_code = 14
