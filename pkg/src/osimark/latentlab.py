"""Gaussian latents, sign injection/extraction, and the latent file format.

All randomness goes through counter-based Philox generators keyed by explicit
64-bit seeds, so any item can be regenerated from ``(seed, stream)`` alone.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .wmcodec import LatentShape

SEED_MOD = 2 ** 64

LATENT_MAGIC = b"OSIMARK-LAT\x00"
LATENT_VERSION = 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``; seeds wrap modulo 2**64."""
    seed = int(seed) % SEED_MOD
    return np.random.Generator(np.random.Philox(key=[seed, int(stream)]))


def item_seed(base_seed: int, index: int) -> int:
    return (int(base_seed) + int(index)) % SEED_MOD


def sample_gaussian(shape: LatentShape, seed: int) -> np.ndarray:
    return make_rng(seed).standard_normal(shape.dims)


def sample_batch(shape: LatentShape, seeds) -> np.ndarray:
    seeds = list(seeds)
    out = np.empty((len(seeds),) + shape.dims)
    for i, s in enumerate(seeds):
        out[i] = sample_gaussian(shape, s)
    return out


def inject_signs(z_tilde: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``|z_tilde| * m``: the magnitudes stay Gaussian, the signs carry the mask."""
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    m = np.asarray(m)
    if z_tilde.shape != m.shape:
        raise ValueError(f"latent shape {z_tilde.shape} != mask shape {m.shape}")
    return np.abs(z_tilde) * m


def extract_signs(z_hat: np.ndarray) -> np.ndarray:
    """Elementwise sign as int8, with sign(0) = +1."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if not np.all(np.isfinite(z_hat)):
        raise ValueError("latent contains non-finite entries")
    return np.where(z_hat < 0, -1, 1).astype(np.int8)


def save_latent(path, z: np.ndarray) -> None:
    z = np.asarray(z)
    if z.ndim != 3:
        raise ValueError(f"latent must be c x h x w, got shape {z.shape}")
    header = LATENT_MAGIC + struct.pack("<I", LATENT_VERSION) + struct.pack("<3I", *z.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(z, dtype="<f4").tobytes())


def load_latent(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 28 or data[:12] != LATENT_MAGIC:
        raise ValueError(f"{path}: not a latent file")
    (version,) = struct.unpack_from("<I", data, 12)
    if version != LATENT_VERSION:
        raise ValueError(f"{path}: unsupported latent version {version}")
    c, h, w = struct.unpack_from("<3I", data, 16)
    body = data[28:]
    if len(body) != 4 * c * h * w:
        raise ValueError(f"{path}: truncated latent payload")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float64)
