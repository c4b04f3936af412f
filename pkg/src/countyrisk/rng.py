"""Deterministic random-stream derivation.

Every random choice in the package flows from one global seed. Named
streams are derived as sha256(seed ":" label), so adding a new consumer
never shifts the draws of existing ones. Per-unit fan-out inside kernels
(permutation replicates, LISA counties, forest nodes) XORs a derived
base seed with the unit index; the numba kernels advance a splitmix64
state from that value, which keeps results independent of thread
scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numba import njit

_U64 = np.uint64
_SPLITMIX_GAMMA = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


@njit(cache=True, nogil=True, inline="always")
def next_u64(state):
    """splitmix64 step: returns (advanced state, 64 random bits)."""
    state = state + _SPLITMIX_GAMMA
    z = state
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    z = z ^ (z >> _U64(31))
    return state, z


def derive_seed(seed: int, label: str) -> int:
    """Derive a 63-bit child seed for the stream named ``label``."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream(seed: int, label: str) -> np.random.Generator:
    """A numpy Generator for the named stream."""
    return np.random.default_rng(derive_seed(seed, label))


def unit_seed(base: int, index: int) -> int:
    """Per-unit kernel seed: base XOR unit index, as an unsigned 64-bit value."""
    return int(np.uint64(base) ^ np.uint64(index))
