"""Small input-validation helpers shared by the estimators and loaders."""
from __future__ import annotations

import numbers

import numpy as np

_FORBIDDEN_ID_CHARS = ("\t", "\n", "\r", ",", ":")


def check_song_id(token: str, what: str = "song id") -> str:
    if not isinstance(token, str) or not token:
        raise ValueError(f"{what} must be a non-empty string, got {token!r}")
    for ch in _FORBIDDEN_ID_CHARS:
        if ch in token:
            raise ValueError(f"{what} {token!r} contains forbidden character {ch!r}")
    return token


def check_fraction(value: float, name: str) -> float:
    if not isinstance(value, numbers.Real) or not 0.0 < float(value) < 1.0:
        raise ValueError(f"{name} must lie in the open interval (0, 1), got {value!r}")
    return float(value)


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_matrix(X, name: str = "X", n_cols: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite 2-D float64 array, optionally with ``n_cols`` columns."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise ValueError(f"{name} has {arr.shape[1]} columns, expected {n_cols}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_vector(x, name: str = "x", size: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def derive_seed(master_seed: int, *keys) -> np.random.Generator:
    """Independent generator for a substream keyed by ``keys``.

    Keys are hashed with CRC-32 so the stream depends only on the key values,
    never on iteration order.
    """
    import zlib

    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, numbers.Integral):
            entropy.append(int(key) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(key).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))
