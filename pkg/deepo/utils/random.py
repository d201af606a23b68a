"""
Seeded random streams.

Every stream is a ``numpy`` PCG64 generator seeded through a
``SeedSequence`` whose entropy is the trial seed and whose spawn key encodes
the stream name, so (experiment, trial, stream) triples are independent of
the order in which trials run.
"""
import zlib
from typing import Union

import numpy as np

StreamKey = Union[int, str]


def _key(part: StreamKey) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *stream: StreamKey) -> np.random.Generator:
    """
    Deterministic generator for ``seed`` and a named stream.

    Example:
        >>> a = make_rng(3, "probe").standard_normal()
        >>> b = make_rng(3, "probe").standard_normal()
        >>> a == b
        True
    """
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(_key(part) for part in stream)
    )
    return np.random.Generator(np.random.PCG64(sequence))
