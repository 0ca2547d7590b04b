"""Labelled seed derivation so one master seed drives every stage."""

import hashlib


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """Stable 63-bit seed from ``(master, label, index)``."""
    digest = hashlib.sha256(f"{int(master)}:{label}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
