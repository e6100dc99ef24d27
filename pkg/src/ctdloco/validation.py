"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import ConfigurationError, NumericError


def check_vector(x, size=None, name="x", allow_batch=False):
    """Return ``x`` as a float64 array of trailing length ``size``.

    With ``allow_batch`` a 2-D array of shape (batch, size) is accepted too.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 or (allow_batch and arr.ndim == 2):
        pass
    else:
        raise ConfigurationError(
            f"{name} must be {'1-D or 2-D' if allow_batch else '1-D'}, got shape {arr.shape}"
        )
    if size is not None and arr.shape[-1] != size:
        raise ConfigurationError(f"{name} has length {arr.shape[-1]}, expected {size}")
    return arr


def check_finite(x, name="x"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains non-finite values")
    return x


def check_matrix(x, shape=None, name="X"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None:
        for got, want in zip(arr.shape, shape):
            if want is not None and got != want:
                raise ConfigurationError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


def check_positive(value, name):
    if not value > 0:
        raise ConfigurationError(f"{name} must be positive, got {value!r}")
    return value
