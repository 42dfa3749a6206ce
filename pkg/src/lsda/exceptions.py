"""Exception hierarchy. CLI exit codes hang off these classes."""


class LSDAError(Exception):
    exit_code = 1


class ValidationError(LSDAError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class MissingArtifactError(LSDAError, FileNotFoundError):
    exit_code = 3


class DivergenceError(LSDAError, ArithmeticError):
    exit_code = 4


class WeightFileError(LSDAError):
    exit_code = 2


class VersionMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class ParseError(ValidationError):
    pass


class UndefinedStatisticError(LSDAError, ArithmeticError):
    exit_code = 4
