"""Exception types.  Each carries the process exit code the CLI maps it to."""


class SM3Error(Exception):
    exit_code = 1


class ConfigError(SM3Error, ValueError):
    exit_code = 2


class MissingArtifactError(SM3Error, FileNotFoundError):
    exit_code = 3


class VersionMismatchError(SM3Error):
    exit_code = 4


class ChecksumError(SM3Error):
    exit_code = 5


class StructureError(SM3Error):
    """Manifest and payload disagree (counts, shapes, missing tensors)."""

    exit_code = 6


class NonFiniteError(SM3Error, FloatingPointError):
    exit_code = 7
