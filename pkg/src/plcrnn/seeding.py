"""Seeded random streams.

Every stochastic step in the package (initialisation, mixing, shuffling)
draws from a named sub-stream of one integer seed, so that two runs with
the same seed are bit-identical regardless of the order in which the
streams are consumed.
"""

import zlib

import numpy as np

_global_seed = 0


def set_seed(seed):
    global _global_seed
    _global_seed = int(seed)


def get_seed():
    return _global_seed


def stream(name, seed=None):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, name)``."""
    if seed is None:
        seed = _global_seed
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))
