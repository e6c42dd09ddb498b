"""Exception hierarchy shared by all idcf modules."""


class IdcfError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(IdcfError, ValueError):
    pass


class DomainError(IdcfError, ValueError):
    pass


class NumericError(IdcfError, ArithmeticError):
    pass


class ConfigError(IdcfError, ValueError):
    pass


class DataError(IdcfError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class DuplicateError(DataError):
    pass


class CheckpointError(DataError):
    pass


class VersionError(CheckpointError):
    pass


class ColdStartError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


class IdentificationError(IdcfError, ValueError):
    pass


class DegeneracyError(IdentificationError):
    pass


class ConsistencyError(IdentificationError):
    pass


class NonIdentifiableError(IdentificationError):
    pass


class InconsistentScenarioError(IdentificationError):
    pass
