"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class SegfuseError(Exception):
    exit_code = 1


class ShapeError(SegfuseError, ValueError):
    exit_code = 2


class ConfigError(SegfuseError, ValueError):
    exit_code = 2


class DomainError(SegfuseError, ValueError):
    exit_code = 2


class ContractError(SegfuseError, RuntimeError):
    exit_code = 2


class MissingArtifactError(SegfuseError, FileNotFoundError):
    exit_code = 3


class DataIOError(SegfuseError, OSError):
    exit_code = 4
