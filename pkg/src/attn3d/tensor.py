"""Dense tensors and the seeded random source.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. Training
runs in float32; float64 is used by the gradient checker. Nothing in the
package relies on numpy broadcasting between two tensors: every binary op
checks that the shapes are identical first.

Random numbers come from :class:`Rng`, a counter-mode SplitMix64 generator.
Draw ``i`` (0-based) of a stream with key ``k`` is::

    z = k + (i + 1) * 0x9E3779B97F4A7C15   (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

which is exactly sequential SplitMix64 seeded with ``k``. The root key is the
user seed. A substream key is the first 8 bytes (little endian) of
BLAKE2b(parent key as 8 LE bytes || "/" || component) applied once per path
component, so ``Rng(7).substream("dropout", 3, 12)`` is fixed forever.
Changing any of this requires bumping :data:`RNG_VERSION`.
"""

from __future__ import annotations

import hashlib
import math
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError, RangeError, ShapeError

RNG_VERSION = 1

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)

DTYPE = np.float32


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------

def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1:
        raise ShapeError("tensor rank must be >= 1")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def new_tensor(shape: Sequence[int], fill: float = 0.0, dtype=DTYPE) -> np.ndarray:
    return np.full(check_shape(shape), fill, dtype=dtype)


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element (not byte) strides of a C-ordered tensor."""
    strides = []
    acc = 1
    for extent in reversed(check_shape(shape)):
        strides.append(acc)
        acc *= extent
    return tuple(reversed(strides))


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    shape = check_shape(shape)
    if len(index) != len(shape):
        raise ShapeError(f"index rank {len(index)} != tensor rank {len(shape)}")
    flat = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise ShapeError(f"index {tuple(index)} out of bounds for {shape}")
        flat = flat * extent + int(i)
    return flat


def require_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, overflow-free, clamped into the open interval (0, 1)."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else DTYPE
    x = x.astype(dtype, copy=False)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    lo = np.finfo(dtype).smallest_subnormal
    hi = np.nextafter(dtype.type(1), dtype.type(0))
    return np.clip(out, lo, hi)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
_UNARY = {"relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    if op in _BINARY:
        if b is None:
            raise ParameterError(f"{op} needs two operands")
        require_same_shape(a, b, op)
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ParameterError(f"{op} takes a single operand")
        return _UNARY[op](a)
    raise ParameterError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

def _splitmix(key: int, start: int, n: int) -> np.ndarray:
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    z = np.uint64(key) + counters * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def _derive_key(parent: int, component) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(parent.to_bytes(8, "little"))
    h.update(b"/")
    h.update(str(component).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-mode SplitMix64 stream. Single owner; never share between workers."""

    def __init__(self, seed: int, _key: Optional[int] = None):
        self.seed = int(seed)
        self.key = (self.seed & _MASK64) if _key is None else _key
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key:#018x}, counter={self.counter})"

    def substream(self, *path) -> "Rng":
        """Independent stream keyed by ``path``; does not consume draws from ``self``."""
        key = self.key
        for component in path:
            key = _derive_key(key, component)
        return Rng(self.seed, _key=key)

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            out = _splitmix(self.key, self.counter, n)
        self.counter += n
        return out

    def random(self, n: Optional[int] = None):
        """Uniform float64 in [0, 1): top 53 bits of each draw times 2**-53."""
        bits = self.next_u64(1 if n is None else n)
        u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if n is None else u

    def uniform_int(self, lo: int, hi: int) -> int:
        """Unbiased integer in [lo, hi] by modulo with rejection of the top partial block."""
        if lo > hi:
            raise RangeError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            u = int(self.next_u64(1)[0])
            if u < limit:
                return lo + u % span

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller, one pair of uniforms per pair of outputs."""
        pairs = (n + 1) // 2
        u = self.random(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return z[:n]

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates from the back, one uniform_int per position."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.uniform_int(0, i)
            order[i], order[j] = order[j], order[i]
        return order


def rng_uniform_int(rng: Rng, lo: int, hi: int) -> int:
    return rng.uniform_int(lo, hi)
