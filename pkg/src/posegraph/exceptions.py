"""Exception hierarchy shared by every module."""


class PoseGraphError(Exception):
    """Base class for all errors raised by posegraph."""


class ContractViolation(PoseGraphError, ValueError):
    """An operation was called with inputs outside its declared domain."""


class DataError(PoseGraphError):
    """Input data (annotations, images, dataset contents) failed validation."""


class ConfigError(PoseGraphError, ValueError):
    """A configuration value is out of range or inconsistent with the data."""


class CheckpointError(PoseGraphError):
    """Base class for problems decoding a serialized artifact."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedStreamError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass
