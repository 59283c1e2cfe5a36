"""Named RNG substreams derived from one global seed."""

import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for ``(seed, name)``; stable across runs and platforms."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
