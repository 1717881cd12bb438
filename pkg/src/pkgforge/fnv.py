"""FNV-1a hashing, 64-bit variant."""

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """Hash a byte string with 64-bit FNV-1a."""
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def fnv1a_64_hex(data: bytes) -> str:
    """Hex digest form of fnv1a_64, zero-padded to 16 characters."""
    return format(fnv1a_64(data), "016x")
