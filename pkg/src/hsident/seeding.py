"""One root seed, independent streams per subsystem (split/init/shuffle/dropout/...)."""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Generator for ``stream`` derived from the root ``seed``.

    Streams are keyed by name, so adding a new consumer never perturbs the
    draws of an existing one.
    """
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
