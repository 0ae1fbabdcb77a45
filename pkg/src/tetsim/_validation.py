"""Input validation helpers shared by the estimators and the functional API."""
import numbers

import numpy as np
from sklearn.utils import check_array

from .errors import InvalidInputError


def check_points(X, *, name="points", min_points=0, copy=False):
    """Return ``X`` as a finite float64 array of shape (n, 3)."""
    try:
        X = check_array(
            X,
            dtype=np.float64,
            ensure_all_finite=True,
            ensure_min_samples=max(min_points, 1) if min_points else 0,
            ensure_2d=True,
            copy=copy,
            input_name=name,
        )
    except ValueError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc
    if X.shape[1] != 3:
        raise InvalidInputError(f"{name}: expected shape (n, 3), got {X.shape}")
    return X


def check_vector(v, size, *, name="vector"):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (size,) or not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name}: expected {size} finite values, got {v!r}")
    return v


def check_index_array(idx, n, *, name="indices", ndim=1):
    idx = np.asarray(idx)
    if idx.size == 0:
        return idx.astype(np.int64)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidInputError(f"{name}: expected integer indices, got {idx.dtype}")
    if idx.ndim != ndim:
        raise InvalidInputError(f"{name}: expected {ndim}-d array, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= n:
        raise InvalidInputError(f"{name}: index out of range [0, {n})")
    return idx.astype(np.int64)


def check_scalar(x, name, *, min_val=None, strict=False, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(x, bool) or not isinstance(x, kind) or not np.isfinite(x):
        raise InvalidInputError(f"{name}: expected a finite {'integer' if integer else 'number'}, got {x!r}")
    if min_val is not None and (x <= min_val if strict else x < min_val):
        op = ">" if strict else ">="
        raise InvalidInputError(f"{name}: must be {op} {min_val}, got {x}")
    return x
