"""MD5 digests and single-block AES-128, written out from the public algorithms.

Both primitives are used to protect the stored page hashes: every page is
digested with MD5 and the 16-octet digest is encrypted as exactly one AES
block under the store key.  No chaining mode or padding is involved because
an MD5 digest is already one AES block.

The MD5 compression loop is compiled with numba when it is importable; the
same function runs as plain Python otherwise.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

__all__ = [
    "Digest128",
    "AesKey128",
    "Md5State",
    "md5_digest",
    "aes128_encrypt_block",
    "aes128_decrypt_block",
]


class Digest128(bytes):
    """Exactly 16 octets: an MD5 digest or one AES block."""

    def __new__(cls, value: bytes | bytearray | memoryview = b"") -> "Digest128":
        value = bytes(value)
        if len(value) != 16:
            raise ValueError(f"Digest128 needs 16 octets, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def fromhex(cls, text: str) -> "Digest128":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"Digest128({self.hex()})"


# --------------------------------------------------------------------------
# MD5

_MASK = 0xFFFFFFFF

# K[i] = floor(|sin(i + 1)| * 2**32)
_MD5_K = np.array([int(abs(math.sin(i + 1)) * 2**32) & _MASK for i in range(64)], dtype=np.int64)
_MD5_S = np.array(
    [7, 12, 17, 22] * 4 + [5, 9, 14, 20] * 4 + [4, 11, 16, 23] * 4 + [6, 10, 15, 21] * 4,
    dtype=np.int64,
)
_MD5_INIT = (0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476)


def _md5_compress(state, words, nblocks, K, S):
    # state: 4 chaining words (int64), words: little-endian message words
    a0 = state[0]
    b0 = state[1]
    c0 = state[2]
    d0 = state[3]
    for blk in range(nblocks):
        base = blk * 16
        a = a0
        b = b0
        c = c0
        d = d0
        for i in range(64):
            if i < 16:
                f = (b & c) | (~b & d)
                g = i
            elif i < 32:
                f = (d & b) | (~d & c)
                g = (5 * i + 1) % 16
            elif i < 48:
                f = b ^ c ^ d
                g = (3 * i + 5) % 16
            else:
                f = c ^ (b | ~d)
                g = (7 * i) % 16
            f &= 0xFFFFFFFF
            t = (a + f + K[i] + words[base + g]) & 0xFFFFFFFF
            s = S[i]
            a = d
            d = c
            c = b
            b = (b + (((t << s) | (t >> (32 - s))) & 0xFFFFFFFF)) & 0xFFFFFFFF
        a0 = (a0 + a) & 0xFFFFFFFF
        b0 = (b0 + b) & 0xFFFFFFFF
        c0 = (c0 + c) & 0xFFFFFFFF
        d0 = (d0 + d) & 0xFFFFFFFF
    state[0] = a0
    state[1] = b0
    state[2] = c0
    state[3] = d0


if njit is not None:
    _md5_compress_fast = njit(cache=True, nogil=True)(_md5_compress)
else:  # pragma: no cover
    _md5_compress_fast = None


@dataclass
class Md5State:
    """Chaining words plus the running message length in bits."""

    a: int = _MD5_INIT[0]
    b: int = _MD5_INIT[1]
    c: int = _MD5_INIT[2]
    d: int = _MD5_INIT[3]
    length_bits: int = 0

    def absorb(self, padded: bytes, message_length: int) -> None:
        nblocks = len(padded) // 64
        state = np.array([self.a, self.b, self.c, self.d], dtype=np.int64)
        if _md5_compress_fast is not None:
            words = np.frombuffer(padded, dtype="<u4").astype(np.int64)
            _md5_compress_fast(state, words, nblocks, _MD5_K, _MD5_S)
            self.a, self.b, self.c, self.d = (int(x) for x in state)
        else:  # pragma: no cover
            st = [self.a, self.b, self.c, self.d]
            words = list(struct.unpack(f"<{nblocks * 16}I", padded))
            _md5_compress(st, words, nblocks, _MD5_K.tolist(), _MD5_S.tolist())
            self.a, self.b, self.c, self.d = st
        self.length_bits = 8 * message_length

    def digest(self) -> Digest128:
        return Digest128(struct.pack("<4I", self.a, self.b, self.c, self.d))


def _md5_pad(message: bytes) -> bytes:
    n = len(message)
    zeros = (55 - n) % 64
    return message + b"\x80" + b"\x00" * zeros + struct.pack("<Q", (8 * n) & 0xFFFFFFFFFFFFFFFF)


def md5_digest(message: bytes | bytearray | memoryview) -> Digest128:
    """Return the MD5 digest of ``message``."""
    message = bytes(message)
    st = Md5State()
    st.absorb(_md5_pad(message), len(message))
    return st.digest()


# --------------------------------------------------------------------------
# AES-128


def _xtime(x: int) -> int:
    x <<= 1
    return (x ^ 0x11B) if x & 0x100 else x


def _gmul(a: int, b: int) -> int:
    p = 0
    while b:
        if b & 1:
            p ^= a
        a = _xtime(a)
        b >>= 1
    return p


def _build_sbox() -> tuple[bytes, bytes]:
    sbox = bytearray(256)
    for x in range(256):
        # multiplicative inverse is x**254 in GF(2^8); 0 maps to 0
        inv = 1
        for _ in range(254):
            inv = _gmul(inv, x)
        if x == 0:
            inv = 0
        y = inv
        for k in range(1, 5):
            y ^= ((inv << k) | (inv >> (8 - k))) & 0xFF
        sbox[x] = y ^ 0x63
    inv_sbox = bytearray(256)
    for i, v in enumerate(sbox):
        inv_sbox[v] = i
    return bytes(sbox), bytes(inv_sbox)


SBOX, INV_SBOX = _build_sbox()
_MUL = {k: bytes(_gmul(x, k) for x in range(256)) for k in (2, 3, 9, 11, 13, 14)}
_RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)


def _expand_key(key: bytes) -> tuple[bytes, ...]:
    words = [key[i : i + 4] for i in range(0, 16, 4)]
    for i in range(4, 44):
        t = words[i - 1]
        if i % 4 == 0:
            t = bytes(SBOX[b] for b in t[1:] + t[:1])
            t = bytes([t[0] ^ _RCON[i // 4 - 1]]) + t[1:]
        words.append(bytes(x ^ y for x, y in zip(words[i - 4], t)))
    return tuple(b"".join(words[4 * r : 4 * r + 4]) for r in range(11))


@dataclass(frozen=True)
class AesKey128:
    """A 128-bit AES key together with its 11 expanded round keys."""

    key: bytes
    round_keys: tuple[bytes, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        key = bytes(self.key)
        if len(key) != 16:
            raise ValueError(f"AES-128 key must be 16 octets, got {len(key)}")
        object.__setattr__(self, "key", key)
        object.__setattr__(self, "round_keys", _expand_key(key))

    @classmethod
    def fromhex(cls, text: str) -> "AesKey128":
        return cls(bytes.fromhex(text.strip()))


# The state is kept column-major as a flat list: state[r + 4*c].

def _add_round_key(s: list[int], rk: bytes) -> None:
    for i in range(16):
        s[i] ^= rk[i]


def _sub_bytes(s: list[int], box: bytes) -> None:
    for i in range(16):
        s[i] = box[s[i]]


def _shift_rows(s: list[int]) -> None:
    # row r rotates left by r columns
    for r in range(1, 4):
        row = [s[r + 4 * c] for c in range(4)]
        for c in range(4):
            s[r + 4 * c] = row[(c + r) % 4]


def _inv_shift_rows(s: list[int]) -> None:
    for r in range(1, 4):
        row = [s[r + 4 * c] for c in range(4)]
        for c in range(4):
            s[r + 4 * c] = row[(c - r) % 4]


def _mix_columns(s: list[int]) -> None:
    m2, m3 = _MUL[2], _MUL[3]
    for c in range(0, 16, 4):
        a0, a1, a2, a3 = s[c : c + 4]
        s[c] = m2[a0] ^ m3[a1] ^ a2 ^ a3
        s[c + 1] = a0 ^ m2[a1] ^ m3[a2] ^ a3
        s[c + 2] = a0 ^ a1 ^ m2[a2] ^ m3[a3]
        s[c + 3] = m3[a0] ^ a1 ^ a2 ^ m2[a3]


def _inv_mix_columns(s: list[int]) -> None:
    m9, m11, m13, m14 = _MUL[9], _MUL[11], _MUL[13], _MUL[14]
    for c in range(0, 16, 4):
        a0, a1, a2, a3 = s[c : c + 4]
        s[c] = m14[a0] ^ m11[a1] ^ m13[a2] ^ m9[a3]
        s[c + 1] = m9[a0] ^ m14[a1] ^ m11[a2] ^ m13[a3]
        s[c + 2] = m13[a0] ^ m9[a1] ^ m14[a2] ^ m11[a3]
        s[c + 3] = m11[a0] ^ m13[a1] ^ m9[a2] ^ m14[a3]


def _as_key(key: AesKey128 | bytes) -> AesKey128:
    return key if isinstance(key, AesKey128) else AesKey128(key)


def _as_block(block: bytes) -> list[int]:
    block = bytes(block)
    if len(block) != 16:
        raise ValueError(f"AES block must be 16 octets, got {len(block)}")
    return list(block)


def aes128_encrypt_block(plaintext: bytes, key: AesKey128 | bytes) -> Digest128:
    """Encrypt one 16-octet block with AES-128."""
    rks = _as_key(key).round_keys
    s = _as_block(plaintext)
    _add_round_key(s, rks[0])
    for rnd in range(1, 10):
        _sub_bytes(s, SBOX)
        _shift_rows(s)
        _mix_columns(s)
        _add_round_key(s, rks[rnd])
    # final round has no MixColumns
    _sub_bytes(s, SBOX)
    _shift_rows(s)
    _add_round_key(s, rks[10])
    return Digest128(bytes(s))


def aes128_decrypt_block(ciphertext: bytes, key: AesKey128 | bytes) -> Digest128:
    """Inverse of :func:`aes128_encrypt_block` under the same key."""
    rks = _as_key(key).round_keys
    s = _as_block(ciphertext)
    _add_round_key(s, rks[10])
    for rnd in range(9, 0, -1):
        _inv_shift_rows(s)
        _sub_bytes(s, INV_SBOX)
        _add_round_key(s, rks[rnd])
        _inv_mix_columns(s)
    _inv_shift_rows(s)
    _sub_bytes(s, INV_SBOX)
    _add_round_key(s, rks[0])
    return Digest128(bytes(s))
