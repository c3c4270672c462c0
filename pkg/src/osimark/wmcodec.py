"""Watermark payloads and the repetition code over the latent grid.

A watermark of ``k = c * (h/f) * (w/f)`` bits is tiled into ``f x f`` spatial
blocks per channel, so every bit occupies ``f**2`` latent positions. Decoding
takes a hard majority vote or sums log-odds across the copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SOFT_EPS = 1e-7


@dataclass(frozen=True)
class LatentShape:
    c: int
    h: int
    w: int
    f_hw: int = 1

    def __post_init__(self):
        for name in ("c", "h", "w", "f_hw"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.h % self.f_hw or self.w % self.f_hw:
            raise ValueError(f"f_hw={self.f_hw} must divide h={self.h} and w={self.w}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.c, self.h, self.w)

    @property
    def n(self) -> int:
        """Number of latent positions."""
        return self.c * self.h * self.w

    @property
    def k(self) -> int:
        """Watermark length in bits."""
        return self.c * (self.h // self.f_hw) * (self.w // self.f_hw)

    @property
    def bit_dims(self) -> tuple[int, int, int]:
        return (self.c, self.h // self.f_hw, self.w // self.f_hw)

    def with_factor(self, f_hw: int) -> "LatentShape":
        return LatentShape(self.c, self.h, self.w, f_hw)

    @classmethod
    def parse(cls, text: str, f_hw: int = 1) -> "LatentShape":
        """Parse ``"4x64x64"``."""
        parts = text.lower().replace("*", "x").split("x")
        if len(parts) != 3:
            raise ValueError(f"shape must look like CxHxW, got {text!r}")
        c, h, w = (int(p) for p in parts)
        return cls(c, h, w, f_hw)


def random_watermark(shape: LatentShape, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=shape.k, dtype=np.uint8)


def _check_bits(wm: np.ndarray, shape: LatentShape) -> np.ndarray:
    wm = np.asarray(wm)
    if wm.shape[-1:] != (shape.k,):
        raise ValueError(f"watermark length {wm.shape[-1:]} does not match k={shape.k}")
    return wm


def _check_grid(grid: np.ndarray, shape: LatentShape) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.shape[-3:] != shape.dims:
        raise ValueError(f"grid trailing shape {grid.shape[-3:]} != {shape.dims}")
    return grid


def _blocks(grid: np.ndarray, shape: LatentShape) -> np.ndarray:
    # (..., c, h, w) -> (..., c, h/f, w/f, f*f) with each block's copies last
    f = shape.f_hw
    c, hb, wb = shape.bit_dims
    lead = grid.shape[:-3]
    g = grid.reshape(lead + (c, hb, f, wb, f))
    g = np.moveaxis(g, -3, -2)
    return g.reshape(lead + (c, hb, wb, f * f))


def repeat_expand(wm: np.ndarray, shape: LatentShape) -> np.ndarray:
    """Tile a ``(..., k)`` bit vector into a ``(..., c, h, w)`` grid."""
    wm = _check_bits(wm, shape)
    f = shape.f_hw
    bits = wm.reshape(wm.shape[:-1] + shape.bit_dims)
    return np.repeat(np.repeat(bits, f, axis=-2), f, axis=-1).astype(np.uint8)


def majority_decode(grid: np.ndarray, shape: LatentShape) -> np.ndarray:
    """Hard majority over the ``f**2`` copies of each bit; ties decode to 0."""
    grid = _check_grid(grid, shape)
    ones = _blocks(grid.astype(np.int64), shape).sum(axis=-1)
    bits = (2 * ones > shape.f_hw ** 2).astype(np.uint8)
    return bits.reshape(grid.shape[:-3] + (shape.k,))


def soft_decode(probs: np.ndarray, shape: LatentShape) -> np.ndarray:
    """Decode per-position probabilities of a 1 bit by summing log-odds across copies."""
    probs = _check_grid(probs, shape)
    p = np.clip(np.asarray(probs, dtype=np.float64), SOFT_EPS, 1.0 - SOFT_EPS)
    llr = _blocks(np.log(p) - np.log1p(-p), shape).sum(axis=-1)
    return (llr > 0).astype(np.uint8).reshape(probs.shape[:-3] + (shape.k,))


def pack_bits(wm: np.ndarray) -> bytes:
    """Big-endian packing, MSB first within each byte, zero-padded tail."""
    return np.packbits(np.asarray(wm, dtype=np.uint8), bitorder="big").tobytes()


def unpack_bits(data: bytes, k: int) -> np.ndarray:
    if len(data) * 8 < k:
        raise ValueError(f"{len(data)} bytes cannot hold {k} bits")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    return bits[:k].copy()
