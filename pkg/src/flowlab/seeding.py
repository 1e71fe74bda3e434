import hashlib


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 63-bit sub-seed for ``(seed, purpose)``."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
