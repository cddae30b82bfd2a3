"""Named, independent random substreams derived from one 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "train", "eval", "sample", "synth", "baseline")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for stream ``name`` (and optional integer ``keys``) under ``seed``.

    Streams are keyed by a stable hash of their name, so drawing from one never
    shifts another.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a non-negative 64-bit integer")
    tag = zlib.crc32(name.encode())
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(seed) >> 32, tag, *map(int, keys)])
