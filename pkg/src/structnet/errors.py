"""Exception hierarchy. Each class maps to a CLI exit code."""


class StructNetError(Exception):
    exit_code = 1


class ConfigError(StructNetError):
    exit_code = 2


class DataError(StructNetError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    pass


class DecodeError(DataError):
    pass


class EmptyRegionError(DataError, ValueError):
    """A region selection (S / NS / All) contains no pixels."""


class ManifestError(ConfigError):
    pass


class NumericalAbort(StructNetError):
    exit_code = 4
