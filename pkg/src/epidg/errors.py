"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so keep the taxonomy small:
configuration misuse, bad data, numerical failure, broken checkpoints.
"""


class EpidgError(Exception):
    """Base class for all package errors."""


class ConfigError(EpidgError):
    """Invalid configuration: bad hyperparameters, variant/dataset mismatch, bad flags."""


class ShapeError(EpidgError):
    """Tensor dimensions do not chain or do not match their contract."""


class DataError(EpidgError):
    """Malformed or inconsistent dataset contents."""


class NumericsError(EpidgError):
    """A public operation produced (or received) NaN/Inf, or training diverged."""


class CheckpointError(EpidgError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
