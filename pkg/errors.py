"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI returns for it.
"""


class EegSslError(Exception):
    exit_code = 1


# ------- configuration -------
class ConfigError(EegSslError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class ScheduleError(ConfigError):
    pass


# ------- data -------
class DataError(EegSslError):
    exit_code = 3


class SchemaError(DataError):
    pass


class SplitError(DataError):
    pass


class IndexingError(DataError):
    pass


class UnsupportedError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class CheckpointError(DataError):
    pass


# ------- numerics -------
class NumericError(EegSslError):
    exit_code = 4


class DomainError(NumericError):
    pass


class DegenerateVarianceError(NumericError):
    pass


class FeatureError(NumericError):
    pass


# ------- engine contracts -------
class ShapeError(EegSslError, ValueError):
    pass


class ValidationError(EegSslError, ValueError):
    pass


class TrainingError(EegSslError):
    pass


class ContractError(EegSslError):
    pass
