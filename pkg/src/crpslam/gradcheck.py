"""Central finite-difference oracle for autodiff gradients (float64)."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, idx, h: float = 1e-3) -> float:
    """Central difference of ``f`` wrt ``arr[idx]``; ``arr`` is perturbed in place and restored."""
    old = arr[idx]
    arr[idx] = old + h
    fp = float(f())
    arr[idx] = old - h
    fm = float(f())
    arr[idx] = old
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe_indices(shape, count: int, stream) -> list[tuple[int, ...]]:
    """``count`` flat positions drawn from ``stream``, as index tuples."""
    size = int(np.prod(shape))
    flat = stream.integers(count, size)
    return [np.unravel_index(int(i), shape) for i in flat]
