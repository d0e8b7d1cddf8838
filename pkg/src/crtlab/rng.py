"""Labeled random substreams derived from a single experiment seed.

Each consumer asks for ``substream(seed, label, *keys)``; streams for
different labels or keys are statistically independent, so adding an attack
or a time step never shifts the numbers drawn by an existing consumer.
"""

import zlib

import numpy as np


def _label_code(label):
    return zlib.crc32(label.encode("utf-8"))


def substream(seed, label, *keys):
    key = (_label_code(label),) + tuple(int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=key)))


def name_key(name):
    """Stable integer key for a string, usable as a substream key."""
    return zlib.crc32(name.encode("utf-8"))
