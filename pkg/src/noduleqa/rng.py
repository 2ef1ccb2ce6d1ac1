"""Counter-based normal streams.

Sample ``i`` of a stream depends only on ``(key, i)``: Philox4x64 block
``i // 4`` yields four 64-bit words, and consecutive word pairs become two
normals through Box-Muller.  Any slice of a stream can therefore be produced
independently and concatenated into exactly the serial result.
"""
from __future__ import annotations

import hashlib

import numpy as np

_WORDS_PER_BLOCK = 4
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def derive_key(*parts) -> int:
    """Stable 64-bit key from arbitrary parts (seed, case id, condition id, ...)."""
    h = hashlib.blake2b(digest_size=8, person=b"noduleqa-rng")
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _uniform_open(words: np.ndarray) -> np.ndarray:
    # top 53 bits, offset by half an ulp: strictly inside (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def normal_block(key: int, start: int, count: int) -> np.ndarray:
    """Standard normals ``[start, start + count)`` of the stream keyed by ``key``."""
    if start < 0 or count < 0:
        raise ValueError("start and count must be non-negative")
    if count == 0:
        return np.empty(0)
    first = start - (start % 2)
    stop = start + count
    last = stop + (stop % 2)
    block0 = first // _WORDS_PER_BLOCK
    skip = first - block0 * _WORDS_PER_BLOCK
    bitgen = np.random.Philox(key=key, counter=block0)
    words = bitgen.random_raw(skip + (last - first))[skip:]
    u1 = _uniform_open(words[0::2])
    u2 = _uniform_open(words[1::2])
    r = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    out = np.empty(last - first)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[start - first : start - first + count]


def normal_field(key: int, shape: tuple[int, ...], chunk: int = 1 << 22) -> np.ndarray:
    """Normals filling ``shape`` in Fortran (x-fastest) order, generated in chunks."""
    n = int(np.prod(shape))
    flat = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        flat[lo:hi] = normal_block(key, lo, hi - lo)
    return flat.reshape(shape, order="F")
