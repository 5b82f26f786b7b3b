"""Deterministic seed derivation.

All randomness in a run flows from one root seed. Subsystems get their own
sub-seed derived from a fixed label, so adding a new consumer never shifts
the seeds of existing ones.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, label: str) -> int:
    """Derive a stable 63-bit sub-seed from a root seed and a label."""
    digest = hashlib.sha256(f"{int(root)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
