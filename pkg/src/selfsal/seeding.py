"""Deterministic seed derivation.

Every stochastic operation in the package draws from a numpy Generator
derived from (base seed, context tags). Randomness at any point of a run
is a pure function of the config seed, so resumed runs replay the exact
random stream without carrying RNG state in checkpoints.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    raise TypeError(f"seed components must be str or int, got {type(part)!r}")


def derive_seed(*parts) -> int:
    """Collapse (seed, tag, indices, ...) into one 32-bit seed."""
    seq = np.random.SeedSequence([_encode(p) for p in parts])
    return int(seq.generate_state(1)[0])


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_encode(p) for p in parts]))
