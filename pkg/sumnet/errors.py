"""Exception hierarchy. The CLI maps these onto exit codes."""


class SumNetError(Exception):
    exit_code = 1


class ValidationError(SumNetError):
    exit_code = 1


class ShapeError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class NumericalError(SumNetError):
    exit_code = 2
