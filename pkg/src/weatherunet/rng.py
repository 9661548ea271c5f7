"""Seeded random streams and value noise.

Every stream is a numpy ``Generator`` over the counter-based Philox4x64
bit generator, keyed by a ``SeedSequence`` built from the global seed plus
a list of words. String keys are hashed with BLAKE2b (8-byte digest,
little-endian) so ``stream(7, "scene_0003", "fog")`` yields the same
numbers on every platform and regardless of the order in which images are
processed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("integer stream keys must be non-negative")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *keys) -> np.random.Generator:
    words = [_word(seed)] + [_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(height: int, width: int, rng: np.random.Generator,
                cell: float = 32.0, octaves: int = 3) -> np.ndarray:
    """Fractal value noise in [0, 1].

    Each octave samples a random lattice with spacing ``cell / 2**k`` and
    interpolates it with a smoothstep-weighted bilinear blend; octave
    amplitudes halve and the sum is normalised by the total amplitude.
    """
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    total = np.zeros((height, width))
    norm = 0.0
    amp = 1.0
    for k in range(octaves):
        step = cell / (2 ** k)
        gy, gx = ys / step, xs / step
        ny = int(np.floor((height - 1) / step)) + 2
        nx = int(np.floor((width - 1) / step)) + 2
        lattice = rng.random((ny, nx))
        y0, x0 = np.floor(gy).astype(int), np.floor(gx).astype(int)
        fy, fx = _smoothstep(gy - y0), _smoothstep(gx - x0)
        top = lattice[y0, x0] * (1 - fx) + lattice[y0, x0 + 1] * fx
        bot = lattice[y0 + 1, x0] * (1 - fx) + lattice[y0 + 1, x0 + 1] * fx
        total += amp * (top * (1 - fy) + bot * fy)
        norm += amp
        amp *= 0.5
    return np.clip(total / norm, 0.0, 1.0)


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for the sub-stream identified by ``keys``."""
    return int(stream(seed, "derive", *keys).integers(0, 2 ** 63))
