"""Seeded random sub-streams.

Every consumer of randomness (data order, augmentation, dynamic labels,
feature-augmentation coin flips, noise injection) draws from its own stream
so that adding or removing draws in one place never shifts another.
"""
import zlib

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def stream_id(name):
    return zlib.crc32(name.encode("utf-8"))


def stream_rng(seed, name, *keys):
    """Generator for the named stream, optionally sub-keyed (e.g. by epoch)."""
    entropy = [int(seed) & 0xFFFFFFFF, stream_id(name)] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _splitmix64(x):
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return x ^ (x >> np.uint64(31))


def keyed_bits(seed, name, ids, *keys):
    """64-bit hash of (seed, stream, keys, id) for every id; order independent."""
    ids = np.asarray(ids, dtype=np.int64).astype(np.uint64)
    h = _splitmix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(stream_id(name)))
    for k in keys:
        h = _splitmix64(h ^ np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF))
    return _splitmix64(h ^ _splitmix64(ids))


def keyed_uniform(seed, name, ids, *keys):
    """Uniform draws in (0, 1), one per id, as a pure function of the id."""
    bits = keyed_bits(seed, name, ids, *keys) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) / float(1 << 53)


def keyed_integers(seed, name, ids, high, *keys):
    """Uniform integers in [0, high), one per id."""
    return np.minimum((keyed_uniform(seed, name, ids, *keys) * high).astype(np.int64), high - 1)
