"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .errors import DimensionMismatch


def check_points(a, dim, name="points", dtype=np.float64):
    """Return ``a`` as a finite ``(n, dim)`` array, promoting a single point to ``(1, dim)``."""
    arr = np.asarray(a, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionMismatch(f"{name} must have shape (n, {dim}), got {arr.shape}")
    return arr


def check_matrix(a, n_cols=None, name="X", dtype=None):
    arr = np.asarray(a) if dtype is None else np.asarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise DimensionMismatch(f"{name} must have {n_cols} columns, got {arr.shape[1]}")
    return arr


def check_random_state(seed):
    """Turn ``seed`` into a ``np.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_fraction(t, name="t"):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {t}")
    return t
