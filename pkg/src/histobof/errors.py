class HistoBofError(Exception):
    """Base class for all errors raised by histobof."""


class DimensionMismatch(HistoBofError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyFeatureList(HistoBofError, ValueError):
    pass
