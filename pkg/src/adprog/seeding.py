"""Deterministic fan-out of one global seed into per-stage seeds.

``derive_seed(global_seed, *labels)`` hashes the seed and the stage labels
with SHA-256 and keeps the first 8 bytes (big-endian) masked to 63 bits, so
each stage can be re-run on its own and still draw the same numbers.
"""
from __future__ import annotations

import hashlib


def derive_seed(global_seed: int, *labels) -> int:
    text = "/".join([str(int(global_seed)), *map(str, labels)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
