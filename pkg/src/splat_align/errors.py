"""Exception hierarchy shared across the package."""


class SplatAlignError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SplatAlignError, ValueError):
    pass


class NumericOverflowError(SplatAlignError, ArithmeticError):
    pass


class OracleUnavailableError(SplatAlignError, RuntimeError):
    """A denoiser oracle could not produce a prediction.

    Carries the oracle ``kind`` and, for remote oracles, the ``endpoint``
    and the last HTTP ``status`` seen (``None`` when the failure was not
    an HTTP status).
    """

    def __init__(self, message, kind=None, endpoint=None, status=None):
        super().__init__(message)
        self.kind = kind
        self.endpoint = endpoint
        self.status = status


class IngestionError(SplatAlignError, ValueError):
    pass
