"""Dense float32 tensor primitives and the seeded random generator.

All arrays are plain numpy ndarrays; parameters and activations live in
float32, while reductions accumulate in float64 so downstream feasibility
checks have headroom.
"""
from __future__ import annotations

import hashlib

import numpy as np

Tensor = np.ndarray

DTYPE = np.float32


def tensor(data, shape: tuple[int, ...] | None = None) -> Tensor:
    """Build a float32 tensor, optionally reshaping flat row-major data."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def check_finite(arr: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(arr)):
        from .errors import NumericError

        raise NumericError(f"{what} contains non-finite values")
    return arr


def _require_2d(arr: Tensor, name: str) -> None:
    if arr.ndim != 2:
        from .errors import DimensionError

        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with explicit inner-dimension checking."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        from .errors import DimensionError

        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def row_l1_distance(a: Tensor, b: Tensor) -> np.ndarray:
    """Per-row L1 distance between two equally shaped matrices (float64)."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape != b.shape:
        from .errors import DimensionError

        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    return diff.sum(axis=1)


def pairwise_sq_euclidean(a: Tensor, b: Tensor, chunk: int = 64) -> np.ndarray:
    """Squared Euclidean distance between every row of `a` and every row of `b`.

    Computed from explicit differences in float64 (chunked over rows of `a`)
    rather than the Gram-matrix identity, so exactly equal rows give exactly
    zero and no entry can go negative.
    """
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[1]:
        from .errors import DimensionError

        raise DimensionError(f"trailing dimensions differ: {a.shape} vs {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for start in range(0, a.shape[0], chunk):
        block = a64[start : start + chunk]
        out[start : start + chunk] = ((block[:, None, :] - b64[None, :, :]) ** 2).sum(axis=2)
    return out


def _derive_key(seed: int, labels: tuple) -> int:
    digest = hashlib.sha256(repr((int(seed),) + labels).encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class Rng:
    """Counter-based generator (Philox) with named child streams.

    Equal seeds give identical draw sequences on every platform.  `stream`
    derives an independent generator from a label tuple, so data generation,
    initialization, and unlearning noise never share state.
    """

    def __init__(self, seed: int, _labels: tuple = ()):
        self.seed = int(seed)
        self._labels = _labels
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, _labels)))

    def stream(self, *labels) -> "Rng":
        return Rng(self.seed, self._labels + tuple(labels))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        return self._gen.uniform(low, high, size=shape).astype(DTYPE)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def normal(self, shape, scale: float = 1.0) -> Tensor:
        return (self._gen.standard_normal(size=shape) * scale).astype(DTYPE)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
