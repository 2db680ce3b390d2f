"""Deterministic seed derivation for independent random streams.

Every stochastic component takes an integer seed and derives its own
substreams through `derive_seed`, so that one global seed fixes every
artifact of a run without the streams aliasing each other.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

_MOD = 2**31 - 1


def derive_seed(seed: int, tag: str) -> int:
    """Mix a parent seed with a stream tag into a new 31-bit seed."""
    h = zlib.crc32(tag.encode("utf-8"))
    return (seed * 1_000_003 + h) % _MOD


def np_rng(seed: int, tag: str = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag) if tag else seed)


def torch_gen(seed: int, tag: str = "") -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, tag) if tag else seed)
    return g
