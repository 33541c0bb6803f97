"""Failure classes; the CLI maps each to its own exit code."""


class ConfigError(ValueError):
    exit_code = 2


class DataError(ValueError):
    exit_code = 3


class NumericError(RuntimeError):
    exit_code = 4


class CheckpointError(DataError):
    pass
