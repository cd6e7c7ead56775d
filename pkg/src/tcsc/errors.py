"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class TcscError(Exception):
    """Base class for all package errors."""


class DataError(TcscError, ValueError):
    """Malformed or inconsistent input data (exit code 3)."""


class DegenerateInputError(DataError):
    """Geometry that cannot be normalized, e.g. coincident eye corners."""


class LandmarkParseError(DataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class HeaderParseError(LandmarkParseError):
    pass


class PointCountError(LandmarkParseError):
    pass


class CoordinateParseError(LandmarkParseError):
    pass


class ImageFormatError(DataError):
    pass


class ConfigError(TcscError, ValueError):
    """Bad configuration file or override (exit code 2)."""


class ModelFormatError(TcscError):
    """Model file cannot be decoded."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class CRCMismatchError(ModelFormatError):
    pass


class DimensionMismatchError(ModelFormatError):
    pass


class NumericsError(TcscError, ArithmeticError):
    """Numerical failure during fitting (exit code 4)."""


class DivergenceError(NumericsError):
    pass


class DecoderFitError(NumericsError):
    pass
