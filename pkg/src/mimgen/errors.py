"""Exception types shared across the package."""


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss.

    ``replay_path`` points at the serialized batch that triggered the abort,
    or is None when nothing could be written.
    """

    def __init__(self, message: str, replay_path=None):
        super().__init__(message)
        self.replay_path = replay_path


class ConfigError(ValueError):
    """A configuration value failed validation or an unknown key was given."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not the one this build writes."""


class WrongKindError(CheckpointError):
    """Checkpoint holds a different artifact kind than the caller expected."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint is truncated or a blob failed its checksum."""


class ShapeMismatchError(CheckpointError):
    """A stored tensor's shape does not match the receiving parameter."""
