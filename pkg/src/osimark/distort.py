"""Image distortions for robustness evaluation and a BSC acting on sign masks.

Images are ``(3, H, W)`` arrays in ``[0, 1]``. Stochastic kinds draw from a
Philox stream keyed by the distortion's own seed, so each application is reproducible.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .latentlab import make_rng

# ITU-T T.81 Annex K luminance table
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class Kind(str, enum.Enum):
    IDENTITY = "Identity"
    RAND_DROP = "RandDrop"
    RAND_CROP = "RandCrop"
    RESIZE = "Resize"
    JPEG = "Jpeg"
    BRIGHT = "Bright"
    GAUS_BLUR = "GausBlur"
    GAUS_STD = "GausStd"
    MED_BLUR = "MedBlur"
    SP_NOISE = "SPNoise"


STOCHASTIC = {Kind.RAND_DROP, Kind.RAND_CROP, Kind.GAUS_STD, Kind.SP_NOISE}


def _valid(kind: Kind, p: float) -> bool:
    if kind is Kind.IDENTITY:
        return True
    if kind in (Kind.RAND_DROP, Kind.SP_NOISE):
        return 0.0 <= p <= 1.0
    if kind in (Kind.RAND_CROP, Kind.RESIZE):
        return 0.0 < p <= 1.0
    if kind is Kind.JPEG:
        return 1 <= p <= 100
    if kind is Kind.MED_BLUR:
        return p >= 1 and float(p).is_integer() and int(p) % 2 == 1
    return p >= 0.0  # Bright, GausBlur, GausStd


@dataclass(frozen=True)
class DistortionSpec:
    kind: Kind
    param: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "param", float(self.param))
        if not np.isfinite(self.param) or not _valid(self.kind, self.param):
            raise ValueError(f"invalid parameter {self.param!r} for {self.kind.value}")

    @property
    def name(self) -> str:
        if self.kind is Kind.IDENTITY:
            return "Clean"
        return self.kind.value

    def with_seed(self, seed: int) -> "DistortionSpec":
        return DistortionSpec(self.kind, self.param, seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "param": self.param, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionSpec":
        return cls(Kind(d["kind"]), d.get("param", 0.0), int(d.get("seed", 0)))


def default_suite(seed: int = 0) -> list[DistortionSpec]:
    """The nine adversarial settings."""
    return [
        DistortionSpec(Kind.RAND_DROP, 0.8, seed),
        DistortionSpec(Kind.RAND_CROP, 0.6, seed),
        DistortionSpec(Kind.RESIZE, 0.25, seed),
        DistortionSpec(Kind.JPEG, 25, seed),
        DistortionSpec(Kind.BRIGHT, 6, seed),
        DistortionSpec(Kind.GAUS_BLUR, 4, seed),
        DistortionSpec(Kind.GAUS_STD, 0.05, seed),
        DistortionSpec(Kind.MED_BLUR, 7, seed),
        DistortionSpec(Kind.SP_NOISE, 0.05, seed),
    ]


def save_suite(path, suite) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in suite], indent=2))


def load_suite(path) -> list[DistortionSpec]:
    return [DistortionSpec.from_dict(d) for d in json.loads(Path(path).read_text())]


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a ``(C, H, W)`` array."""
    _, h, w = img.shape

    def axis(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def jpeg_table(quality: float) -> np.ndarray:
    q = float(quality)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((JPEG_LUMA * scale + 50.0) / 100.0), 1, 255)


def jpeg_roundtrip(img: np.ndarray, quality: float) -> np.ndarray:
    c, h, w = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img * 255.0 - 128.0, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = x.shape[1:]
    blocks = x.reshape(c, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    table = jpeg_table(quality)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    out = idctn(coef, axes=(-2, -1), norm="ortho")
    out = out.transpose(0, 1, 3, 2, 4).reshape(c, H, W)[:, :h, :w]
    return (out + 128.0) / 255.0


def apply(image: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {img.shape}")
    kind, p = spec.kind, spec.param
    _, h, w = img.shape
    if kind is Kind.IDENTITY:
        return img.copy()
    rng = make_rng(spec.seed, stream=17) if kind in STOCHASTIC else None
    if kind is Kind.RAND_DROP:
        n_drop = int(round(p * h * w))
        keep = np.ones(h * w, dtype=bool)
        keep[rng.permutation(h * w)[:n_drop]] = False
        out = img * keep.reshape(h, w)
    elif kind is Kind.RAND_CROP:
        side = np.sqrt(p)
        ch, cw = max(1, int(round(side * h))), max(1, int(round(side * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = np.zeros_like(img)
        out[:, top:top + ch, left:left + cw] = img[:, top:top + ch, left:left + cw]
    elif kind is Kind.RESIZE:
        sh, sw = max(1, int(round(p * h))), max(1, int(round(p * w)))
        out = bilinear_resize(bilinear_resize(img, sh, sw), h, w)
    elif kind is Kind.JPEG:
        out = jpeg_roundtrip(img, p)
    elif kind is Kind.BRIGHT:
        out = p * img
    elif kind is Kind.GAUS_BLUR:
        if p == 0:
            return img.copy()
        out = ndimage.gaussian_filter(img, sigma=(0, p, p), mode="reflect", truncate=3.0)
    elif kind is Kind.GAUS_STD:
        out = img + p * rng.standard_normal(img.shape)
    elif kind is Kind.MED_BLUR:
        k = int(p)
        out = ndimage.median_filter(img, size=(1, k, k), mode="reflect")
    elif kind is Kind.SP_NOISE:
        hit = rng.random((h, w)) < p
        salt = rng.random((h, w)) < 0.5
        out = np.where(hit, salt.astype(np.float64), img)
    else:  # pragma: no cover
        raise ValueError(f"unhandled distortion {kind}")
    return np.clip(out, 0.0, 1.0)


def apply_batch(images: np.ndarray, spec: DistortionSpec, base_index: int = 0) -> np.ndarray:
    """Distort a stack; image ``i`` gets seed ``spec.seed + base_index + i``."""
    out = np.empty(images.shape, dtype=np.float64)
    for i, img in enumerate(images):
        out[i] = apply(img, spec.with_seed((spec.seed + base_index + i) % 2 ** 64))
    return out


@dataclass(frozen=True)
class BscSpec:
    crossover: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.crossover <= 0.5:
            raise ValueError(f"crossover must lie in [0, 0.5], got {self.crossover}")


def bsc_flip(mask: np.ndarray, spec: BscSpec) -> np.ndarray:
    """Negate each ±1 entry independently with probability ``spec.crossover``."""
    mask = np.asarray(mask)
    flips = make_rng(spec.seed, stream=19).random(mask.shape) < spec.crossover
    return np.where(flips, -mask, mask).astype(mask.dtype)
