"""Stable seed derivation so every stage is independently reproducible."""
from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Deterministic 31-bit seed from a global seed plus stage/sample labels."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF
