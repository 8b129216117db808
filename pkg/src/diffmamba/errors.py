"""Exception hierarchy shared by every module."""


class DiffSSMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DiffSSMError, ValueError):
    pass


class DimensionError(DiffSSMError, ValueError):
    pass


class DataError(DiffSSMError, ValueError):
    pass


class NumericalError(DiffSSMError, ArithmeticError):
    pass


class ResourceError(DiffSSMError, RuntimeError):
    pass


class IntegrityError(DiffSSMError, IOError):
    pass
