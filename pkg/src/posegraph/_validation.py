"""Input checking helpers used across the package.

Image planes are plain ``numpy`` arrays of shape ``(height, width, channels)``
in float64.  These helpers coerce and validate them so that every public entry
point fails early with a :class:`ContractViolation` naming the offending shape.
"""
import numpy as np

from .exceptions import ContractViolation


def check_plane(a, name="input", *, channels=None, min_hw=None, allow_2d=True):
    """Return ``a`` as a finite float64 array of shape (H, W, C).

    A 2D array is promoted to a single-channel plane when ``allow_2d`` is set.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2 and allow_2d:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ContractViolation(f"{name}: expected an (H, W, C) plane, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1 or c < 1:
        raise ContractViolation(f"{name}: every dimension must be >= 1, got shape {arr.shape}")
    if channels is not None and c != channels:
        raise ContractViolation(f"{name}: expected {channels} channel(s), got shape {arr.shape}")
    if min_hw is not None and (h < min_hw[0] or w < min_hw[1]):
        raise ContractViolation(
            f"{name}: spatial extent {h}x{w} is smaller than the required {min_hw[0]}x{min_hw[1]}"
        )
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name}: contains NaN or Inf")
    return arr


def check_map(a, name="map"):
    """Return ``a`` as a finite 2D float64 array (a single-channel plane squeezed)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2 or arr.size == 0:
        raise ContractViolation(f"{name}: expected a non-empty 2D map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name}: contains NaN or Inf")
    return arr


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ContractViolation(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
