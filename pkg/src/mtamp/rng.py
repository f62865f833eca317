"""Seeded, counter-based random streams.

Every draw in the package comes from ``stream(seed, *labels)``.  The labels
name the purpose of the stream (``"matrix"``, ``"noise"``, a run index, an
iteration index, ...) and are folded into the spawn key of a
``numpy.random.SeedSequence`` that keys a Philox generator.  Two streams with
different labels are statistically independent, and a stream never depends
on how many draws were taken from any other stream.
"""

import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed, *labels):
    """Return a Philox generator for ``seed`` split by ``labels``."""
    if seed is None:
        raise ValueError("an explicit seed is required")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_key(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))
