"""Seed handling.

All randomness flows through :class:`numpy.random.Generator` backed by PCG64.
Batch jobs derive one child seed per entry with :func:`child_seed`, so entry
``i`` gets the same stream no matter how many workers run or in what order.
"""

from __future__ import annotations

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & SEED_MASK))


def child_seed(master_seed: int, index: int) -> int:
    """Stable 64-bit seed for entry ``index`` of a batch seeded with ``master_seed``."""
    payload = f"{int(master_seed) & SEED_MASK}:{int(index)}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def draw_seed(rng: np.random.Generator) -> int:
    """Draw a seed for a sub-generator (noise tables and the like) from ``rng``."""
    return int(rng.integers(0, 2**63 - 1))
