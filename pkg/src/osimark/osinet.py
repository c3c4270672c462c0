"""One-step sign extractor.

The model re-encodes an image with the fixed logit encoder, applies a learnable
per-channel affine adapter (``psi``) and feeds the result to a small sign
classifier (``theta``: 3x3 conv c->hidden, ReLU, 3x3 conv hidden->c, sigmoid).
One forward pass gives the probability that each initial-noise entry is positive.

Gradients are derived by hand; ``tests/test_osinet.py`` checks them against
central finite differences.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import distort
from ._conv import cols3x3, conv3x3, conv3x3_adjoint, conv3x3_weight_grad
from .latentlab import extract_signs, make_rng
from .toypipe import OP_COUNTS, PipelineConfig, TripletSet, encode

log = logging.getLogger(__name__)

HIDDEN = 32
BCE_EPS = 1e-7
PARAM_NAMES = ("psi_scale", "psi_bias", "w1", "b1", "w2", "b2")
PSI_PARAMS = ("psi_scale", "psi_bias")
THETA_PARAMS = ("w1", "b1", "w2", "b2")

CKPT_MAGIC = b"OSIMARK-CKP\x00"
CKPT_VERSION = 1


class Strategy(str, enum.Enum):
    DEFAULT = "default"
    DETACH = "detach"
    DECOUPLE = "decouple"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class OsiModel:
    psi_scale: np.ndarray
    psi_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, c: int, seed: int = 0, hidden: int = HIDDEN) -> "OsiModel":
        """Identity adapter, He-initialised first layer, zero final layer (probs start at 0.5)."""
        rng = make_rng(seed, stream=29)
        return cls(
            psi_scale=np.ones(c),
            psi_bias=np.zeros(c),
            w1=rng.standard_normal((hidden, c, 3, 3)) * math.sqrt(2.0 / (9 * c)),
            b1=np.zeros(hidden),
            w2=np.zeros((c, hidden, 3, 3)),
            b2=np.zeros(c),
        )

    @property
    def channels(self) -> int:
        return self.psi_scale.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "OsiModel":
        return OsiModel(**{k: v.copy() for k, v in self.params().items()})

    def save(self, path) -> None:
        out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(PARAM_NAMES))]
        for name, arr in self.params().items():
            raw = name.encode()
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(out))

    @classmethod
    def load(cls, path) -> "OsiModel":
        data = Path(path).read_bytes()
        if data[:12] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, count = struct.unpack_from("<II", data, 12)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 20
        tensors = {}
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, pos)
                name = data[pos + 2:pos + 2 + nlen].decode()
                pos += 2 + nlen
                (ndim,) = struct.unpack_from("<I", data, pos)
                shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
                pos += 4 + 4 * ndim
                size = int(np.prod(shape))
                arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
                tensors[name] = arr.reshape(shape).astype(np.float64)
                pos += 4 * size
        except (struct.error, ValueError) as exc:
            raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
        if set(tensors) != set(PARAM_NAMES) or pos != len(data):
            raise ValueError(f"{path}: corrupt checkpoint")
        return cls(**tensors)


def _forward(model: OsiModel, enc: np.ndarray) -> dict:
    OP_COUNTS["classifier"] += 1
    s = model.psi_scale[:, None, None]
    b = model.psi_bias[:, None, None]
    z = s * enc + b
    cols1 = cols3x3(z)
    a1 = conv3x3(z, model.w1, model.b1, cols=cols1)
    h1 = np.maximum(a1, 0.0)
    cols2 = cols3x3(h1)
    logit = conv3x3(h1, model.w2, model.b2, cols=cols2)
    return {"enc": enc, "z": z, "cols1": cols1, "a1": a1, "h1": h1, "cols2": cols2,
            "logit": logit, "p": expit(logit)}


def predict_latent(model: OsiModel, enc: np.ndarray):
    """Classifier pass on encoder output. Returns ``(probs, z0_hat)``."""
    enc = np.asarray(enc, dtype=np.float64)
    squeeze = enc.ndim == 3
    cache = _forward(model, enc[None] if squeeze else enc)
    p, z = cache["p"], cache["z"]
    return (p[0], z[0]) if squeeze else (p, z)


def predict(model: OsiModel, image: np.ndarray, cfg: PipelineConfig):
    """One encoder pass plus one classifier pass: ``(probs, z0_hat)``."""
    return predict_latent(model, encode(image, cfg))


def mask_from_probs(probs: np.ndarray) -> np.ndarray:
    return extract_signs(np.asarray(probs) - 0.5)


def _bce(p, y):
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-y * np.log(pc) - (1.0 - y) * np.log1p(-pc)))


def labels_from(zT: np.ndarray) -> np.ndarray:
    return (extract_signs(zT) + 1) / 2.0


def loss_and_grads(model: OsiModel, enc, z0, zT, *, use_bce=True, use_mse=True,
                   bce_to_psi=True, need_grads=True):
    """Objective ``BCE + MSE`` on one batch and its parameter gradients.

    ``bce_to_psi=False`` cuts the BCE gradient at the adapter output.
    Returns ``((total, bce, mse), grads)``; disabled terms contribute no gradient
    but are still reported.
    """
    enc = np.asarray(enc, dtype=np.float64)
    if enc.ndim == 3:
        enc, z0, zT = enc[None], np.asarray(z0)[None], np.asarray(zT)[None]
    cache = _forward(model, enc)
    p, z = cache["p"], cache["z"]
    y = labels_from(zT)
    count = p.size
    bce = _bce(p, y)
    diff = z - z0
    mse = float(np.mean(diff ** 2))
    total = (bce if use_bce else 0.0) + (mse if use_mse else 0.0)
    if not need_grads:
        return (total, bce, mse), None

    grads = {name: np.zeros_like(v) for name, v in model.params().items()}
    dz = np.zeros_like(z)
    if use_bce:
        live = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
        dlogit = (p - y) * live / count
        grads["w2"] = conv3x3_weight_grad(cache["h1"], dlogit, cols=cache["cols2"])
        grads["b2"] = dlogit.sum(axis=(0, 2, 3))
        da1 = conv3x3_adjoint(dlogit, model.w2) * (cache["a1"] > 0)
        grads["w1"] = conv3x3_weight_grad(z, da1, cols=cache["cols1"])
        grads["b1"] = da1.sum(axis=(0, 2, 3))
        if bce_to_psi:
            dz += conv3x3_adjoint(da1, model.w1)
    if use_mse:
        dz += 2.0 * diff / count
    grads["psi_scale"] = (dz * enc).sum(axis=(0, 2, 3))
    grads["psi_bias"] = dz.sum(axis=(0, 2, 3))
    return (total, bce, mse), grads


def loss(model: OsiModel, triplet, cfg: PipelineConfig):
    """``(total, bce, mse)`` for one triplet (or a stacked batch)."""
    enc = encode(triplet.image, cfg)
    return loss_and_grads(model, enc, triplet.z0, triplet.zT, need_grads=False)[0]


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, model: OsiModel, grads: dict, names) -> None:
        for name in names:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            t = self.t[name] = self.t.get(name, 0) + 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            param = getattr(model, name)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 11
    batch: int = 16
    lr: float = 1e-4
    aug_prob: float = 0.5
    strategy: Strategy = Strategy.DEFAULT
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ValueError("aug_prob must lie in [0, 1]")
        if self.lr < 0 or self.epochs < 0 or self.batch < 1:
            raise ValueError("need lr >= 0, epochs >= 0 and batch >= 1")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch": self.batch, "lr": self.lr,
                "aug_prob": self.aug_prob, "strategy": self.strategy.value, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    bce: float
    mse: float
    total: float
    stage: str = "joint"


@dataclass
class TrainResult:
    model: OsiModel
    history: list[EpochStats] = field(default_factory=list)

    def history_csv(self) -> str:
        lines = ["epoch,bce,mse,total"]
        lines += [f"{h.epoch},{h.bce:.8g},{h.mse:.8g},{h.total:.8g}" for h in self.history]
        return "\n".join(lines) + "\n"


def _stages(tc: TrainConfig):
    # (stage name, epochs, loss flags, trainable parameter groups)
    if tc.strategy is Strategy.DEFAULT:
        return [("joint", tc.epochs, dict(use_bce=True, use_mse=True, bce_to_psi=True), PARAM_NAMES)]
    if tc.strategy is Strategy.DETACH:
        return [("detach", tc.epochs, dict(use_bce=True, use_mse=True, bce_to_psi=False), PARAM_NAMES)]
    first = tc.epochs // 2
    return [
        ("adapter", first, dict(use_bce=False, use_mse=True), PSI_PARAMS),
        ("classifier", tc.epochs - first, dict(use_bce=True, use_mse=False), THETA_PARAMS),
    ]


def augment(images: np.ndarray, prob: float, rng: np.random.Generator, suite=None) -> np.ndarray:
    """With probability ``prob`` replace each image by one random suite distortion of it."""
    suite = suite or distort.default_suite()
    out = np.array(images, dtype=np.float64)
    for i in range(len(out)):
        if rng.random() < prob:
            spec = suite[int(rng.integers(len(suite)))]
            out[i] = distort.apply(out[i], spec.with_seed(int(rng.integers(2 ** 63))))
    return out


def train(model: OsiModel, data: TripletSet, tc: TrainConfig, cfg: PipelineConfig | None = None,
          suite=None) -> TrainResult:
    """Fit ``model`` (a copy is trained) with Adam on mini-batches of ``data``."""
    if len(data) == 0:
        raise ValueError("training set is empty")
    cfg = cfg or data.cfg
    model = model.copy()
    rng = make_rng(tc.seed, stream=23)
    opt = Adam(lr=tc.lr)
    history: list[EpochStats] = []
    epoch = 0
    for stage, n_epochs, flags, names in _stages(tc):
        for _ in range(n_epochs):
            epoch += 1
            order = rng.permutation(len(data))
            sums = np.zeros(3)
            seen = 0
            for lo in range(0, len(order), tc.batch):
                idx = np.sort(order[lo:lo + tc.batch])
                images = augment(data.images[idx], tc.aug_prob, rng, suite)
                enc = encode(images, cfg)
                losses, grads = loss_and_grads(model, enc, data.z0[idx], data.zT[idx], **flags)
                if not all(math.isfinite(v) for v in losses):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} batch {lo // tc.batch}: "
                        f"total={losses[0]} bce={losses[1]} mse={losses[2]}")
                opt.step(model, grads, names)
                sums += np.array(losses[1:] + (losses[1] + losses[2],)) * len(idx)
                seen += len(idx)
            bce, mse, total = sums / seen
            history.append(EpochStats(epoch, bce, mse, total, stage))
            log.info("epoch %d [%s] bce=%.5f mse=%.6f total=%.5f", epoch, stage, bce, mse, total)
    return TrainResult(model, history)
