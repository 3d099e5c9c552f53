"""Deterministic derivation of named RNG sub-streams from one master seed.

Every source of randomness in the package draws from a stream named after
its component (data / train / eval / ...), so reruns with the same master
seed reproduce each component independently of the others.
"""

import hashlib

import numpy as np


def derive_seed(master_seed: int, stream: str) -> int:
    """Map (master seed, stream name) to a stable 63-bit seed."""
    digest = hashlib.sha256(f"{master_seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def stream_rng(master_seed: int, stream: str) -> np.random.Generator:
    """RNG for a named sub-stream of the master seed."""
    return np.random.default_rng(derive_seed(master_seed, stream))
