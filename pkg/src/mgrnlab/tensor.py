"""Dense numeric kernels and a seeded, counter-based random stream.

Vectors and matrices are plain float64 numpy arrays. The kernels accept an
optional leading batch axis: ``affine`` maps ``(..., cols) -> (..., rows)``.

Random numbers come from the Philox-4x64 counter generator. A stream is the
pair ``(seed, position)`` where ``position`` counts consumed 64-bit words, so
the same pair always produces the same next values on every platform.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "affine",
    "sigmoid",
    "tanh",
    "hadamard",
    "RngStream",
    "derive_seed",
    "raw_words",
    "uniform_draws",
    "normal_draws",
    "WORDS_PER_NORMAL",
    "retain_freed_memory",
]

#: 64-bit words consumed by one standard-normal draw (Box-Muller, cosine branch).
WORDS_PER_NORMAL = 2
#: 64-bit words consumed by one uniform draw.
WORDS_PER_UNIFORM = 1

_PHILOX_BLOCK = 4
_INV_2_53 = 1.0 / 9007199254740992.0


class ShapeError(ValueError):
    """Raised when operand shapes do not agree."""


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``W @ x + b``, with ``x`` optionally batched on leading axes."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.ndim != 1 or x.ndim < 1:
        raise ShapeError(f"affine expects W 2-d, b 1-d; got W{W.shape}, x{x.shape}, b{b.shape}")
    if W.shape[1] != x.shape[-1] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"affine shape mismatch: W{W.shape}, x{x.shape}, b{b.shape}")
    return x @ W.T + b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function as ``(1 + tanh(x/2)) / 2``.

    The tanh form never overflows, so no branch on the sign of ``x`` is needed.
    """
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x, dtype=np.float64))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard length mismatch: {a.shape} vs {b.shape}")
    return a * b


@dataclass(frozen=True)
class RngStream:
    """Immutable position in a Philox word stream.

    Drawing never mutates a stream; the draw functions return the advanced
    stream alongside the values.
    """

    seed: int
    position: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if self.position < 0:
            raise ValueError("position must be non-negative")

    def advanced(self, words: int) -> "RngStream":
        return RngStream(self.seed, self.position + words)

    def spawn(self, *tags) -> "RngStream":
        """Fresh stream whose seed is ``derive_seed(self.seed, *tags)``."""
        return RngStream(derive_seed(self.seed, *tags))


def derive_seed(*parts) -> int:
    """64-bit seed from the BLAKE2b digest of ``repr`` of each part, joined by ``|``."""
    text = "|".join(repr(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def raw_words(stream: RngStream, n: int) -> tuple[np.ndarray, RngStream]:
    """Return ``n`` raw uint64 words starting at ``stream.position``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    block, offset = divmod(stream.position, _PHILOX_BLOCK)
    gen = np.random.Philox(key=stream.seed, counter=block)
    words = gen.random_raw(offset + n)[offset:]
    return words, stream.advanced(n)


def uniform_draws(stream: RngStream, n: int) -> tuple[np.ndarray, RngStream]:
    """``n`` doubles in [0, 1) built from the top 53 bits of each word."""
    words, nxt = raw_words(stream, n * WORDS_PER_UNIFORM)
    return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53, nxt


def normal_draws(stream: RngStream, n: int) -> tuple[np.ndarray, RngStream]:
    """``n`` i.i.d. N(0, 1) variates via the Box-Muller transform.

    Each variate consumes exactly two words ``(w1, w2)``: with
    ``u1 = 1 - U(w1)`` in (0, 1] and ``u2 = U(w2)``, the value is
    ``sqrt(-2 log u1) * cos(2 pi u2)``. Hence ``normal_draws(s, a + b)``
    equals the concatenation of two consecutive draws of ``a`` and ``b``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    u, nxt = uniform_draws(stream, WORDS_PER_NORMAL * n)
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2), nxt


_HEAP_TUNED = False


def retain_freed_memory() -> bool:
    """Keep large freed numpy buffers on the heap instead of returning them.

    Recurrent training allocates many same-sized temporaries per step; by
    default glibc serves each from fresh mmap pages and the page faults
    dominate the runtime. Raising the mmap and trim thresholds lets those
    buffers be reused. Idempotent; returns False where glibc is unavailable.
    """
    global _HEAP_TUNED
    if _HEAP_TUNED:
        return True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    ok = libc.mallopt(M_MMAP_THRESHOLD, 512 * 2**20) == 1
    ok &= libc.mallopt(M_TRIM_THRESHOLD, 1024 * 2**20) == 1
    _HEAP_TUNED = ok
    return ok
