class FlagError(Exception):
    """Base class for package errors."""


class ConfigError(FlagError):
    pass


class DatasetError(FlagError):
    pass


class GraphFormatError(DatasetError):
    pass


class DivergenceError(FlagError):
    """Training loss became non-finite."""
