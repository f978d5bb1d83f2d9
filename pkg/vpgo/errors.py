"""Typed errors raised across the package."""
from typing import Optional


class VPGOError(Exception):
    """Base class for every error raised on purpose by vpgo."""


class ShapeError(VPGOError, ValueError):
    """Tensor shapes or sequence lengths do not line up."""


class ConfigError(VPGOError, ValueError):
    """Invalid configuration; `key` names the offending dotted key."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class TrajectoryLoadError(VPGOError, OSError):
    """A trajectory file could not be read."""


class MissingArrayError(TrajectoryLoadError):
    """A required array is absent from the container."""


class LengthMismatchError(TrajectoryLoadError):
    """Arrays in the container disagree on length."""


class CorruptFileError(TrajectoryLoadError):
    """The container is not a readable HDF5 file."""


class TrajectoryExportError(VPGOError, OSError):
    """A trajectory could not be written."""


class CheckpointError(VPGOError, OSError):
    """A checkpoint file is missing or unreadable."""


class ReportError(VPGOError, OSError):
    """An evaluation report file is missing."""


class InvalidTrajectoryError(VPGOError, ValueError):
    """A Trajectory violates its invariants."""


class WindowRangeError(VPGOError, IndexError):
    """Requested window does not fit in the trajectory."""


class RecurrentStateError(VPGOError, RuntimeError):
    """A recurrent step was called before the state was initialized."""


class MissingTargetsError(VPGOError, ValueError):
    """Posterior-mode rollout requested without ground-truth targets."""


class TrainingDivergedError(VPGOError, RuntimeError):
    """The training loss became NaN or infinite."""


class EmptyDatasetError(VPGOError, ValueError):
    """A dataset or test set holds no usable trajectories."""


class MetricInputError(VPGOError, ValueError):
    """Inputs to a metric violate its preconditions."""


class MissingLabelsError(VPGOError, ValueError):
    """Stage evaluation needs per-frame stage labels."""
