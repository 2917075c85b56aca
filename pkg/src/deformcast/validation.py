"""Small input-validation helpers shared across the package.

Error messages always name both the expected and the observed shape so
failures point at the offending argument directly.
"""

import numpy as np


def as_float_array(name, x, ndim=None):
    """Coerce to a C-contiguous float64 array, optionally checking ndim."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(
            f"{name}: expected a {ndim}-d array, got shape {arr.shape}"
        )
    return arr


def check_shape(name, arr, expected):
    """Require an exact shape; entries of None in `expected` are free."""
    shape = tuple(arr.shape)
    if len(shape) != len(expected) or any(
        e is not None and s != e for s, e in zip(shape, expected)
    ):
        raise ValueError(f"{name}: expected shape {expected}, got {shape}")


def check_same_shape(name_a, a, name_b, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"{name_a} and {name_b} must share a shape, got "
            f"{tuple(a.shape)} vs {tuple(b.shape)}"
        )


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise ValueError(f"{name}: contains {bad} non-finite values")


def check_positive(name, value):
    if not value > 0:
        raise ValueError(f"{name}: must be positive, got {value!r}")
