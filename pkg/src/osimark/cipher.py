"""Keystreams and sign-mask encryption.

Two schemes produce the keystream that scrambles the repeated watermark before
it becomes the sign pattern of the initial latent:

* ``CHACHA20``: the 20-round ChaCha block function (RFC 8439 layout, 32-bit
  block counter starting at 0), evaluated for all needed blocks at once.
* ``XORPAD``: a keyed SHAKE-256 stream over ``key || nonce``.

Bytes expand to bits MSB first.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KEY_BYTES = 32
NONCE_BYTES = 12

_CONSTANTS = np.array([0x61707865, 0x3320646E, 0x79622D32, 0x6B206574], dtype=np.uint32)
_QUARTER_ROUNDS = (
    (0, 4, 8, 12), (1, 5, 9, 13), (2, 6, 10, 14), (3, 7, 11, 15),
    (0, 5, 10, 15), (1, 6, 11, 12), (2, 7, 8, 13), (3, 4, 9, 14),
)


class Scheme(enum.IntEnum):
    CHACHA20 = 0
    XORPAD = 1

    @classmethod
    def parse(cls, name: "str | int | Scheme") -> "Scheme":
        if isinstance(name, (int, Scheme)):
            return cls(int(name))
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {"chacha20": cls.CHACHA20, "chacha": cls.CHACHA20,
                   "xorpad": cls.XORPAD, "xor": cls.XORPAD}
        if key not in aliases:
            raise ValueError(f"unknown cipher scheme {name!r}")
        return aliases[key]


@dataclass(frozen=True)
class WatermarkKey:
    key: bytes
    nonce: bytes
    scheme: Scheme = Scheme.CHACHA20

    def __post_init__(self):
        if len(self.key) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(self.key)}")
        if len(self.nonce) != NONCE_BYTES:
            raise ValueError(f"nonce must be {NONCE_BYTES} bytes, got {len(self.nonce)}")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @classmethod
    def from_seed(cls, seed: int, scheme: "Scheme | str" = Scheme.CHACHA20) -> "WatermarkKey":
        from .latentlab import make_rng

        raw = make_rng(seed, stream=7).bytes(KEY_BYTES + NONCE_BYTES)
        return cls(raw[:KEY_BYTES], raw[KEY_BYTES:], Scheme.parse(scheme))

    def to_bytes(self) -> bytes:
        return self.key + self.nonce + bytes([int(self.scheme)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "WatermarkKey":
        if len(data) != KEY_BYTES + NONCE_BYTES + 1:
            raise ValueError(f"key file must be {KEY_BYTES + NONCE_BYTES + 1} bytes, got {len(data)}")
        try:
            scheme = Scheme(data[-1])
        except ValueError:
            raise ValueError(f"unknown scheme tag {data[-1]}") from None
        return cls(bytes(data[:KEY_BYTES]), bytes(data[KEY_BYTES:-1]), scheme)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WatermarkKey":
        return cls.from_bytes(Path(path).read_bytes())


def _rotl(v: np.ndarray, n: int) -> np.ndarray:
    return (v << np.uint32(n)) | (v >> np.uint32(32 - n))


SCALAR_BLOCKS = 4  # below this many blocks plain ints beat numpy's per-call overhead


def _block_scalar(init: list[int]) -> list[int]:
    s = list(init)
    for _ in range(10):
        for a, b, c, d in _QUARTER_ROUNDS:
            s[a] = (s[a] + s[b]) & 0xFFFFFFFF
            x = s[d] ^ s[a]
            s[d] = ((x << 16) | (x >> 16)) & 0xFFFFFFFF
            s[c] = (s[c] + s[d]) & 0xFFFFFFFF
            x = s[b] ^ s[c]
            s[b] = ((x << 12) | (x >> 20)) & 0xFFFFFFFF
            s[a] = (s[a] + s[b]) & 0xFFFFFFFF
            x = s[d] ^ s[a]
            s[d] = ((x << 8) | (x >> 24)) & 0xFFFFFFFF
            s[c] = (s[c] + s[d]) & 0xFFFFFFFF
            x = s[b] ^ s[c]
            s[b] = ((x << 7) | (x >> 25)) & 0xFFFFFFFF
    return [(x + y) & 0xFFFFFFFF for x, y in zip(s, init)]


def chacha20_blocks(key: bytes, nonce: bytes, counter: int, n_blocks: int) -> bytes:
    """Serialized keystream for blocks ``counter .. counter + n_blocks - 1``."""
    if counter < 0 or counter + n_blocks > 2 ** 32:
        raise ValueError("block counter out of the 32-bit range")
    key_words = struct.unpack("<8I", key)
    nonce_words = struct.unpack("<3I", nonce)
    if n_blocks <= SCALAR_BLOCKS:
        head = [int(w) for w in _CONSTANTS] + list(key_words)
        return b"".join(
            struct.pack("<16I", *_block_scalar(head + [counter + i] + list(nonce_words)))
            for i in range(n_blocks))
    init = np.empty((16, n_blocks), dtype=np.uint32)
    init[0:4] = _CONSTANTS[:, None]
    init[4:12] = np.array(key_words, dtype=np.uint32)[:, None]
    init[12] = np.arange(counter, counter + n_blocks, dtype=np.uint64).astype(np.uint32)
    init[13:16] = np.array(nonce_words, dtype=np.uint32)[:, None]
    s = init.copy()
    for _ in range(10):
        for a, b, c, d in _QUARTER_ROUNDS:
            s[a] += s[b]; s[d] = _rotl(s[d] ^ s[a], 16)
            s[c] += s[d]; s[b] = _rotl(s[b] ^ s[c], 12)
            s[a] += s[b]; s[d] = _rotl(s[d] ^ s[a], 8)
            s[c] += s[d]; s[b] = _rotl(s[b] ^ s[c], 7)
    s += init
    # words little-endian, blocks in counter order
    return np.ascontiguousarray(s.T).astype("<u4").tobytes()


def chacha20_block(key: bytes, nonce: bytes, counter: int) -> bytes:
    return chacha20_blocks(key, nonce, counter, 1)


def keystream_bytes(key: WatermarkKey, n_bytes: int) -> bytes:
    if key.scheme is Scheme.CHACHA20:
        n_blocks = -(-n_bytes // 64)
        return chacha20_blocks(key.key, key.nonce, 0, n_blocks)[:n_bytes]
    return hashlib.shake_256(b"osimark-xorpad" + key.key + key.nonce).digest(n_bytes)


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")


def keystream(key: WatermarkKey, n_bits: int) -> np.ndarray:
    """``n_bits`` keystream bits as a uint8 0/1 vector."""
    if n_bits < 1:
        raise ValueError("n_bits must be >= 1")
    return bytes_to_bits(keystream_bytes(key, -(-n_bits // 8)))[:n_bits]


def _aligned(ks: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    # a keystream covers one latent; broadcast it over any leading batch axes
    ks = np.asarray(ks)
    for m in range(1, len(target_shape) + 1):
        tail = target_shape[len(target_shape) - m:]
        if int(np.prod(tail)) == ks.size:
            return ks.reshape(tail)
    raise ValueError(f"keystream of length {ks.size} does not fit grid shape {target_shape}")


def encrypt_mask(grid: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """XOR the bit grid with the keystream and map to a ±1 sign mask (int8)."""
    grid = np.asarray(grid, dtype=np.uint8)
    e = grid ^ _aligned(ks, grid.shape).astype(np.uint8)
    return (2 * e.astype(np.int8) - 1).astype(np.int8)


def decrypt_mask(mask_hat: np.ndarray, ks: np.ndarray) -> np.ndarray:
    mask_hat = np.asarray(mask_hat)
    if not np.all((mask_hat == 1) | (mask_hat == -1)):
        raise ValueError("sign mask entries must be exactly -1 or +1")
    e = ((mask_hat + 1) // 2).astype(np.uint8)
    return e ^ _aligned(ks, mask_hat.shape).astype(np.uint8)


def decrypt_probs(probs: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """Probabilities of a positive sign -> probabilities of a decrypted 1 bit."""
    probs = np.asarray(probs, dtype=np.float64)
    flip = _aligned(ks, probs.shape).astype(bool)
    return np.where(flip, 1.0 - probs, probs)
