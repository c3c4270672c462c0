"""A desk-scale stand-in for the latent-diffusion generation/inversion channel.

Generation integrates the linear ODE ``dz/dt = A z + b(t)`` from ``t=1`` (the
initial noise) down to ``t=0`` with explicit Euler steps and decodes the result
to pixels. ``A`` is a fixed, seeded, linear two-layer 3x3 convolution scaled to
spectral norm ``drift_norm``; ``b(t) = b0 + t * b1`` is a per-channel bias.

The decoder maps every latent pixel to a ``3 x ph x pw`` image patch through a
block with orthonormal columns followed by a sigmoid, so the logit encoder is an
exact left inverse until 8-bit quantization (or a distortion) intervenes.
"""

from __future__ import annotations

import functools
import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm
from scipy.sparse.linalg import LinearOperator, svds

from ._conv import conv3x3, conv3x3_adjoint
from .latentlab import item_seed, make_rng, sample_batch
from .wmcodec import LatentShape

ENCODE_EPS = 1e-4
DRIFT_HIDDEN = 32
DENSE_LIMIT = 4096  # latents up to this size apply the drift as a dense matrix
PIXEL_BIAS_SCALE = 0.1

# forward-pass instrumentation: encoder, decoder, drift and classifier calls
OP_COUNTS: Counter = Counter()


@dataclass(frozen=True)
class PipelineConfig:
    shape: LatentShape = field(default_factory=lambda: LatentShape(4, 16, 16))
    steps_gen: int = 50
    drift_seed: int = 1
    decoder_seed: int = 2
    image_hw: tuple[int, int] = (64, 64)
    quantize: bool = True
    drift_norm: float = 0.5
    bias_scale: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        if self.steps_gen < 1:
            raise ValueError("steps_gen must be >= 1")
        H, W = self.image_hw
        c, h, w = self.shape.dims
        if H % h or W % w:
            raise ValueError(f"image size {H}x{W} must be a multiple of latent size {h}x{w}")
        if 3 * (H // h) * (W // w) < c:
            raise ValueError("each image patch needs at least as many values as latent channels")
        if self.drift_norm < 0 or self.bias_scale < 0:
            raise ValueError("drift_norm and bias_scale must be non-negative")

    @property
    def patch(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.shape.h, self.image_hw[1] // self.shape.w)

    @property
    def image_dims(self) -> tuple[int, int, int]:
        return (3,) + self.image_hw

    def replace(self, **changes) -> "PipelineConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return PipelineConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape.dims)
        d["f_hw"] = self.shape.f_hw
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        shape = d.pop("shape", [4, 16, 16])
        f_hw = d.pop("f_hw", 1)
        if isinstance(shape, str):
            shape = LatentShape.parse(shape, f_hw)
        elif not isinstance(shape, LatentShape):
            shape = LatentShape(*shape, f_hw=f_hw)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline fields: {sorted(unknown)}")
        return cls(shape=shape, **d)


def rowwise_matmul(x, mat_t):
    """``x @ mat_t`` whose rows do not depend on how many rows are batched.

    BLAS takes a different code path for a single row, so one row is padded to two.
    """
    if x.shape[0] == 1:
        return (np.concatenate([x, x]) @ mat_t)[:1]
    return x @ mat_t


class Drift:
    """The velocity field ``A z + b0 + t * b1`` of the toy flow."""

    def __init__(self, k1, k2, b0, b1, scale):
        self.k1 = k1
        self.k2 = k2
        self.b0 = b0
        self.b1 = b1
        self.scale = scale
        self._dense_t = None

    def _conv(self, zb):
        return self.scale * conv3x3(conv3x3(zb, self.k1), self.k2)

    def materialize(self, dims) -> None:
        """Cache ``A`` as a dense matrix; used for every later application."""
        n = int(np.prod(dims))
        basis = np.eye(n).reshape((n,) + tuple(dims))
        self._dense_t = np.ascontiguousarray(self._conv(basis).reshape(n, n))

    def linear(self, z):
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 3
        zb = z[None] if squeeze else z
        if self.scale == 0.0:
            out = np.zeros_like(zb)
        elif self._dense_t is not None:
            flat = zb.reshape(len(zb), -1)
            out = rowwise_matmul(flat, self._dense_t).reshape(zb.shape)
        else:
            out = self._conv(zb)
        return out[0] if squeeze else out

    def linear_adjoint(self, z):
        zb = np.asarray(z, dtype=np.float64)[None]
        if self.scale == 0.0:
            return np.zeros_like(zb[0])
        return self.scale * conv3x3_adjoint(conv3x3_adjoint(zb, self.k2), self.k1)[0]

    def bias(self, t: float):
        return (self.b0 + t * self.b1)[:, None, None]

    def __call__(self, z, t: float):
        OP_COUNTS["drift"] += 1
        return self.linear(z) + self.bias(t)

    def dense(self, dims) -> np.ndarray:
        """The matrix of ``A`` acting on flattened latents (small shapes only)."""
        n = int(np.prod(dims))
        if self._dense_t is not None:
            return self._dense_t.T.copy()
        basis = np.eye(n).reshape((n,) + tuple(dims))
        return self.linear(basis).reshape(n, n).T

    def exact_flow(self, z, t0: float, t1: float) -> np.ndarray:
        """Closed-form solution of the affine ODE via an augmented matrix exponential."""
        dims = np.shape(z)
        n = int(np.prod(dims))
        c = dims[0]
        per = n // c
        M = np.zeros((n + 2, n + 2))
        M[:n, :n] = self.dense(dims)
        M[:n, n] = np.repeat(self.b1, per)      # coefficient of t
        M[:n, n + 1] = np.repeat(self.b0, per)  # coefficient of 1
        M[n, n + 1] = 1.0                       # dt/ds = 1
        state = np.concatenate([np.ravel(z), [t0, 1.0]])
        return (expm((t1 - t0) * M) @ state)[:n].reshape(dims)


def _unit_operator_norm(k1, k2, dims) -> float:
    raw = Drift(k1, k2, np.zeros(dims[0]), np.zeros(dims[0]), 1.0)
    n = int(np.prod(dims))
    if n <= 1024:
        return float(np.linalg.norm(raw.dense(dims), 2))
    op = LinearOperator(
        (n, n),
        matvec=lambda v: raw.linear(v.reshape(dims)).ravel(),
        rmatvec=lambda v: raw.linear_adjoint(v.reshape(dims)).ravel(),
        dtype=np.float64,
    )
    s = svds(op, k=1, return_singular_vectors=False, tol=1e-10, random_state=0)
    return float(s[0])


@functools.lru_cache(maxsize=32)
def _drift(dims, drift_seed, drift_norm, bias_scale) -> Drift:
    c = dims[0]
    rng = make_rng(drift_seed, stream=11)
    k1 = rng.standard_normal((DRIFT_HIDDEN, c, 3, 3)) / np.sqrt(9 * c)
    k2 = rng.standard_normal((c, DRIFT_HIDDEN, 3, 3)) / np.sqrt(9 * DRIFT_HIDDEN)
    b0 = bias_scale * rng.standard_normal(c)
    b1 = bias_scale * rng.standard_normal(c)
    scale = 0.0
    if drift_norm > 0:
        scale = drift_norm / _unit_operator_norm(k1, k2, dims)
    drift = Drift(k1, k2, b0, b1, scale)
    if scale > 0 and int(np.prod(dims)) <= DENSE_LIMIT:
        drift.materialize(dims)
    return drift


def drift_for(cfg: PipelineConfig) -> Drift:
    return _drift(cfg.shape.dims, cfg.drift_seed, cfg.drift_norm, cfg.bias_scale)


class Decoder:
    def __init__(self, block, pixel_bias, latent_dims, patch):
        self.block = block            # (3*ph*pw, c), orthonormal columns
        self.pixel_bias = pixel_bias  # (3, H, W)
        self.latent_dims = latent_dims
        self.patch = patch

    def linear(self, z):
        """Pre-sigmoid image logits of ``W z`` (no bias)."""
        c, h, w = self.latent_dims
        ph, pw = self.patch
        z = np.asarray(z, dtype=np.float64)
        lead = z.shape[:-3]
        zz = z.reshape((-1, c, h, w))
        patches = np.einsum("pc,nchw->nhwp", self.block, zz)
        img = patches.reshape(-1, h, w, 3, ph, pw).transpose(0, 3, 1, 4, 2, 5)
        return img.reshape(lead + (3, h * ph, w * pw))

    def linear_t(self, logits):
        c, h, w = self.latent_dims
        ph, pw = self.patch
        logits = np.asarray(logits, dtype=np.float64)
        lead = logits.shape[:-3]
        x = logits.reshape(-1, 3, h, ph, w, pw).transpose(0, 2, 4, 1, 3, 5)
        x = x.reshape(-1, h, w, 3 * ph * pw)
        z = np.einsum("pc,nhwp->nchw", self.block, x)
        return z.reshape(lead + (c, h, w))

    def dense(self) -> np.ndarray:
        n = int(np.prod(self.latent_dims))
        basis = np.eye(n).reshape((n,) + tuple(self.latent_dims))
        return self.linear(basis).reshape(n, -1).T


@functools.lru_cache(maxsize=32)
def _decoder(dims, image_hw, decoder_seed) -> Decoder:
    c, h, w = dims
    ph, pw = image_hw[0] // h, image_hw[1] // w
    rng = make_rng(decoder_seed, stream=13)
    q, r = np.linalg.qr(rng.standard_normal((3 * ph * pw, c)))
    q = q * np.sign(np.diag(r))
    pixel_bias = PIXEL_BIAS_SCALE * rng.standard_normal((3,) + tuple(image_hw))
    return Decoder(q, pixel_bias, dims, (ph, pw))


def decoder_for(cfg: PipelineConfig) -> Decoder:
    return _decoder(cfg.shape.dims, cfg.image_hw, cfg.decoder_seed)


def _check_latent(z, cfg: PipelineConfig):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-3:] != cfg.shape.dims:
        raise ValueError(f"latent shape {z.shape[-3:]} does not match pipeline {cfg.shape.dims}")
    return z


def _check_image(image, cfg: PipelineConfig):
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-3:] != cfg.image_dims:
        raise ValueError(f"image shape {image.shape[-3:]} does not match pipeline {cfg.image_dims}")
    return image


def euler(z, field, t_start: float, t_end: float, steps: int, path: bool = False):
    """Explicit Euler from ``t_start`` to ``t_end``; optionally return every iterate."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = (t_end - t_start) / steps
    z = np.array(z, dtype=np.float64)
    iterates = [z.copy()] if path else None
    for i in range(steps):
        z = z + h * field(z, t_start + i * h)
        if path:
            iterates.append(z.copy())
    return (z, iterates) if path else z


def decode(z0, cfg: PipelineConfig) -> np.ndarray:
    z0 = _check_latent(z0, cfg)
    OP_COUNTS["decode"] += 1
    dec = decoder_for(cfg)
    image = 1.0 / (1.0 + np.exp(-(dec.linear(z0) + dec.pixel_bias)))
    if cfg.quantize:
        image = np.round(image * 255.0) / 255.0
    return image


def generate(zT, cfg: PipelineConfig):
    """Run the flow from noise to ``z0`` and decode. Returns ``(z0, image)``."""
    zT = _check_latent(zT, cfg)
    z0 = euler(zT, drift_for(cfg), 1.0, 0.0, cfg.steps_gen)
    return z0, decode(z0, cfg)


def encode(image, cfg: PipelineConfig) -> np.ndarray:
    image = _check_image(image, cfg)
    OP_COUNTS["encode"] += 1
    dec = decoder_for(cfg)
    x = np.clip(image, ENCODE_EPS, 1.0 - ENCODE_EPS)
    return dec.linear_t(np.log(x) - np.log1p(-x) - dec.pixel_bias)


def invert_multistep(image, cfg: PipelineConfig, steps_inv: int, z0=None, return_path: bool = False):
    """Encode, then integrate the flow back from ``t=0`` to ``t=1``.

    ``z0`` replaces the encoder output (the true-latent alignment study).
    With ``return_path`` the result is ``(zT_hat, [step0, ..., step_T])``
    where step 0 is the encoder output.
    """
    if steps_inv < 1:
        raise ValueError("steps_inv must be >= 1")
    start = encode(image, cfg) if z0 is None else _check_latent(z0, cfg)
    return euler(start, drift_for(cfg), 0.0, 1.0, steps_inv, path=return_path)


@dataclass
class Triplet:
    image: np.ndarray
    z0: np.ndarray
    zT: np.ndarray


TRIPLET_MAGIC = b"OSIMARK-TRI\x00"
TRIPLET_VERSION = 1


@dataclass
class TripletSet:
    """A batch of ``(I, z0, zT)`` records sharing one pipeline config."""

    images: np.ndarray  # (N, 3, H, W) float32
    z0: np.ndarray      # (N, c, h, w)
    zT: np.ndarray      # (N, c, h, w)
    cfg: PipelineConfig
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.z0)

    def __getitem__(self, i) -> Triplet:
        return Triplet(self.images[i].astype(np.float64), self.z0[i], self.zT[i])

    def subset(self, idx) -> "TripletSet":
        idx = np.asarray(idx)
        seeds = [self.seeds[i] for i in idx] if self.seeds else []
        return TripletSet(self.images[idx], self.z0[idx], self.zT[idx], self.cfg, seeds)

    def save(self, path) -> None:
        meta = json.dumps({"pipeline": self.cfg.to_dict(), "seeds": [int(s) for s in self.seeds]}).encode()
        c, h, w = self.cfg.shape.dims
        H, W = self.cfg.image_hw
        header = TRIPLET_MAGIC + struct.pack("<I", TRIPLET_VERSION) + struct.pack(
            "<7I", len(self), c, h, w, 3, H, W) + struct.pack("<I", len(meta)) + meta
        with open(path, "wb") as fh:
            fh.write(header)
            for i in range(len(self)):
                fh.write(np.ascontiguousarray(self.images[i], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(self.z0[i], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(self.zT[i], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "TripletSet":
        data = Path(path).read_bytes()
        if data[:12] != TRIPLET_MAGIC:
            raise ValueError(f"{path}: not a triplet dataset")
        (version,) = struct.unpack_from("<I", data, 12)
        if version != TRIPLET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        n, c, h, w, three, H, W = struct.unpack_from("<7I", data, 16)
        (meta_len,) = struct.unpack_from("<I", data, 44)
        meta = json.loads(data[48:48 + meta_len])
        cfg = PipelineConfig.from_dict(meta["pipeline"])
        if cfg.shape.dims != (c, h, w) or cfg.image_hw != (H, W) or three != 3:
            raise ValueError(f"{path}: header shapes disagree with embedded config")
        body = np.frombuffer(data, dtype="<f4", offset=48 + meta_len)
        rec = 3 * H * W + 2 * c * h * w
        if body.size != n * rec:
            raise ValueError(f"{path}: expected {n} records, payload is corrupt or truncated")
        body = body.reshape(n, rec)
        images = body[:, :3 * H * W].reshape(n, 3, H, W).astype(np.float32)
        z0 = body[:, 3 * H * W:3 * H * W + c * h * w].reshape(n, c, h, w).astype(np.float64)
        zT = body[:, 3 * H * W + c * h * w:].reshape(n, c, h, w).astype(np.float64)
        return cls(images, z0, zT, cfg, meta.get("seeds", []))


def synth_dataset(n: int, cfg: PipelineConfig, seed: int, chunk: int = 256) -> TripletSet:
    """``n`` watermark-free triplets; item ``i`` uses seed ``seed + i``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    H, W = cfg.image_hw
    seeds = [item_seed(seed, i) for i in range(n)]
    images = np.empty((n, 3, H, W), dtype=np.float32)
    z0 = np.empty((n,) + cfg.shape.dims)
    zT = np.empty((n,) + cfg.shape.dims)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        zT[lo:hi] = sample_batch(cfg.shape, seeds[lo:hi])
        z0[lo:hi], img = generate(zT[lo:hi], cfg)
        images[lo:hi] = img
    return TripletSet(images, z0, zT, cfg, seeds)
