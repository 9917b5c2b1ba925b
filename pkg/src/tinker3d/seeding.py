"""Deterministic seed derivation.

Every stochastic operation takes a seed derived from (base seed, operation
path), so adding new operations never perturbs existing ones' randomness and
reruns are reproducible. Hashing uses blake2b, not Python's process-salted
hash().
"""

from __future__ import annotations

import hashlib

__all__ = ["seed_for"]


def seed_for(base_seed: int, path: str) -> int:
    digest = hashlib.blake2b(f"{base_seed}:{path}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFF
