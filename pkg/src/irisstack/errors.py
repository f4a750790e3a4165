"""Exception hierarchy shared by every stage of the pipeline."""


class IrisStackError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IrisStackError, ValueError):
    """Tensor extents do not satisfy an operation's shape contract."""


class InputError(IrisStackError, ValueError):
    """Empty or otherwise unusable input data."""


class DegenerateInputError(InputError):
    """A vector or distribution is too degenerate to process (zero norm, zero variance)."""


class UsageError(IrisStackError, RuntimeError):
    """An API was called in a way its contract forbids."""


class GeometryError(IrisStackError, ValueError):
    """Patch geometry or iris circles are infeasible."""


class ConfigError(IrisStackError, ValueError):
    """A configuration field is missing or out of range."""


class DatasetError(IrisStackError, ValueError):
    """A dataset directory is malformed."""


class MiningError(IrisStackError, ValueError):
    """A batch cannot produce triplets."""


class LabelError(IrisStackError, ValueError):
    """A class label is outside the classifier's range."""


class SampleLookupError(IrisStackError, KeyError):
    """An embedding or sample id is missing."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CheckpointError(IrisStackError, ValueError):
    """A checkpoint or embedding file is corrupt or incompatible."""


class TrainingError(IrisStackError, RuntimeError):
    """Training diverged (non-finite loss)."""
