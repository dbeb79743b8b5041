"""Deterministic derivation of independent RNG streams from one seed."""

import zlib

import numpy as np


def derive_rng(seed: int, *keys: str) -> np.random.Generator:
    """Generator for the stream named by ``keys`` under the root ``seed``.

    Streams with different keys are statistically independent, and a stream
    never depends on which other streams were drawn.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(k.encode("utf-8")) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
