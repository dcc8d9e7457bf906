"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_array(value, name, dtype=None, ndim=None):
    """Coerce to a numpy array, optionally checking dimensionality."""
    arr = np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr, name):
    """Reject arrays containing NaN or infinity."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_labels(labels, num_classes, name="labels"):
    """Integer class labels must reference an existing class row."""
    labels = as_array(labels, name, ndim=1)
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"{name} must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise ValueError(
            f"{name}: label out of range (got {bad}, expected [0, {num_classes}))"
        )
    return labels.astype(np.int64)


def check_unit_interval(value, name):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def check_positive(value, name):
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_non_negative(value, name):
    if value < 0:
        raise ValueError(f"{name} must be non-negative, got {value}")
    return value
