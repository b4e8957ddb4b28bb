"""
Seeded random streams.

Uniform variates come from numpy's PCG64; Gaussian variates are produced
with the Box-Muller transform from those uniforms so that a stream's normal
draws are fully determined by its seed and the documented algorithm.

One global seed fans out to named sub-seeds with :func:`derive_seed`
(BLAKE2b over ``"<seed>/<name>"``), so toggling one source of randomness
leaves the others untouched. Per-sample streams (:class:`SampleRNG`) are
keyed by (seed, sample index) which makes results independent of how a
batch is sharded across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    """Hash-split ``seed`` into an independent 63-bit sub-seed."""
    key = "/".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


def box_muller(gen: np.random.Generator, n: int) -> np.ndarray:
    """``n`` standard normal draws from ``gen`` (float64)."""
    m = (n + 1) // 2
    u1 = gen.random(m)
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


class BatchRNG:
    """A single stream that fills whole arrays at once."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape) -> np.ndarray:
        return low + (high - low) * self.gen.random(shape)

    def normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        return box_muller(self.gen, int(np.prod(shape))).reshape(shape)

    def rademacher(self, shape) -> np.ndarray:
        return np.where(self.gen.random(shape) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


class SampleRNG:
    """One independent stream per sample; axis 0 of every draw is the sample axis."""

    def __init__(self, seed: int, indices):
        self.seed = int(seed)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.streams = [BatchRNG(derive_seed(seed, "sample", int(i))) for i in self.indices]

    def __len__(self):
        return len(self.streams)

    def _check(self, shape):
        shape = tuple(shape)
        if not shape or shape[0] != len(self.streams):
            raise ValueError(f"draw shape {shape} does not lead with {len(self.streams)} samples")
        return shape

    def uniform(self, low, high, shape) -> np.ndarray:
        shape = self._check(shape)
        return np.stack([s.uniform(low, high, shape[1:]) for s in self.streams])

    def normal(self, shape) -> np.ndarray:
        shape = self._check(shape)
        return np.stack([s.normal(shape[1:]) for s in self.streams])

    def rademacher(self, shape) -> np.ndarray:
        shape = self._check(shape)
        return np.stack([s.rademacher(shape[1:]) for s in self.streams])

    def subset(self, rows) -> "SampleRNG":
        """View on a subset of the streams (shares generator state)."""
        out = SampleRNG.__new__(SampleRNG)
        out.seed = self.seed
        out.indices = self.indices[rows]
        out.streams = [self.streams[i] for i in np.atleast_1d(np.arange(len(self.streams))[rows])]
        return out


class FrozenNoise:
    """Replays one fixed array for every normal draw (used for gradient checks)."""

    def __init__(self, noise: np.ndarray):
        self.noise = np.asarray(noise)

    def normal(self, shape) -> np.ndarray:
        if tuple(shape) != self.noise.shape:
            raise ValueError(f"frozen noise has shape {self.noise.shape}, requested {tuple(shape)}")
        return self.noise
