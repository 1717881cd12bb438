"""Hash primitive pinned against published FNV-1a 64-bit test vectors."""

from hypothesis import given
from hypothesis import strategies as st

from pkgforge.fnv import fnv1a_64, fnv1a_64_hex

# Reference values computed from the algorithm's published parameters
# (offset basis 14695981039346656037, prime 1099511628211).
KNOWN_VECTORS = {
    b"": 0xCBF29CE484222325,
    b"a": 0xAF63DC4C8601EC8C,
    b"foobar": 0x85944171F73967E8,
}


def _oracle(data: bytes) -> int:
    value = 14695981039346656037
    for byte in data:
        value ^= byte
        value = (value * 1099511628211) % 2**64
    return value


def test_known_vectors() -> None:
    for data, expected in KNOWN_VECTORS.items():
        assert fnv1a_64(data) == expected


def test_hex_is_zero_padded_lowercase() -> None:
    assert fnv1a_64_hex(b"") == "cbf29ce484222325"
    assert len(fnv1a_64_hex(b"foobar")) == 16


@given(st.binary(max_size=256))
def test_matches_independent_oracle(data: bytes) -> None:
    assert fnv1a_64(data) == _oracle(data)


@given(st.binary(max_size=256))
def test_stays_in_64_bits(data: bytes) -> None:
    assert 0 <= fnv1a_64(data) < 2**64
