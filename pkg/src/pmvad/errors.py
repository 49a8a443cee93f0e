"""Exception types shared across the package."""


class PmvadError(Exception):
    """Base class; the CLI turns these into structured non-zero exits."""

    code = "error"


class ConfigError(PmvadError, ValueError):
    code = "config"


class ContractError(PmvadError, ValueError):
    """Shape or argument contract violated by a caller."""

    code = "contract"


class DatasetError(PmvadError, IOError):
    code = "dataset"


class MalformedManifestError(DatasetError):
    code = "malformed_manifest"


class ChecksumError(DatasetError):
    code = "checksum"


class CheckpointError(PmvadError, IOError):
    code = "checkpoint"


class NonFiniteError(PmvadError, FloatingPointError):
    code = "non_finite"


class UndefinedAUCError(PmvadError, ValueError):
    code = "undefined_auc"
