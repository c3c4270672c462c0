"""Detection and capacity statistics.

Under the null hypothesis an unwatermarked image yields ``k`` fair coin flips,
so the number of matched bits is ``Bin(k, 1/2)`` and its upper tail is a
regularized incomplete beta function: ``P[X > t] = I_{1/2}(t + 1, k - t)``.
Thresholds are carried as integer match counts internally; the fraction
``t / k`` is only for reporting.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import betainc

from .wmcodec import LatentShape

LOG_AUC_FPR_RANGE = (1e-12, 1e-1)
LOG_AUC_POINTS = 111


def bit_accuracy(wm, wm_hat) -> float | np.ndarray:
    """Fraction of matching bits along the last axis."""
    wm = np.asarray(wm)
    wm_hat = np.asarray(wm_hat)
    if wm.shape[-1] != wm_hat.shape[-1]:
        raise ValueError(f"watermark lengths differ: {wm.shape[-1]} vs {wm_hat.shape[-1]}")
    acc = np.mean(wm == wm_hat, axis=-1)
    return float(acc) if np.ndim(acc) == 0 else acc


def null_tail(k: int, t: int) -> float:
    """``P[Bin(k, 1/2) > t]``."""
    if t < 0:
        return 1.0
    if t >= k:
        return 0.0
    return float(betainc(t + 1, k - t, 0.5))


def threshold_for_fpr(k: int, fpr: float) -> tuple[float, int]:
    """Smallest match count ``t`` whose null tail ``P[X > t]`` is at most ``fpr``.

    Returns ``(t / k, t)``; an image is flagged when its match count exceeds ``t``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < fpr < 1.0:
        raise ValueError("fpr must lie strictly between 0 and 1")
    lo, hi = -1, k  # null_tail(lo) > fpr >= null_tail(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if null_tail(k, mid) <= fpr:
            hi = mid
        else:
            lo = mid
    return hi / k, hi


def tpr_at_fpr(accs, k: int, fpr: float) -> float:
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size == 0:
        raise ValueError("need at least one accuracy")
    if np.any((accs < 0) | (accs > 1)):
        raise ValueError("accuracies must lie in [0, 1]")
    tau, _ = threshold_for_fpr(k, fpr)
    return float(np.mean(accs > tau))


def fpr_grid(n: int = LOG_AUC_POINTS, lo: float = LOG_AUC_FPR_RANGE[0],
             hi: float = LOG_AUC_FPR_RANGE[1]) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


def tpr_curve(accs, k: int, fprs) -> np.ndarray:
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size == 0:
        raise ValueError("need at least one accuracy")
    taus = np.array([threshold_for_fpr(k, f)[0] for f in fprs])
    return (accs[None, :] > taus[:, None]).mean(axis=1)


def log_auc(accs, k: int, n_points: int = LOG_AUC_POINTS) -> float:
    """Area under TPR versus log10(FPR) on [1e-12, 1e-1], normalised to [0, 1]."""
    fprs = fpr_grid(n_points)
    x = np.log10(fprs)
    tpr = tpr_curve(accs, k, fprs)
    return float(np.trapezoid(tpr, x) / (x[-1] - x[0]))


@dataclass(frozen=True)
class DetectionReport:
    bit_accuracy: float
    k: int
    threshold_tau: float
    fpr_target: float
    detected: bool


def detect(wm, wm_hat, fpr: float) -> DetectionReport:
    acc = bit_accuracy(wm, wm_hat)
    k = int(np.shape(wm)[-1])
    tau, _ = threshold_for_fpr(k, fpr)
    return DetectionReport(acc, k, tau, fpr, bool(acc > tau))


def binary_entropy(p: float) -> float:
    """H2(p) in bits, with 0 log 0 = 0."""
    return -sum(q * math.log2(q) for q in (p, 1.0 - p) if q > 0.0)


@dataclass(frozen=True)
class ChannelRates:
    crossover_p: float
    capacity: float
    payload_rate: float
    log2_users: float

    def to_dict(self) -> dict:
        return asdict(self)


def bsc_rates(acc: float, shape: LatentShape) -> ChannelRates:
    """Capacity of the BSC implied by a bit accuracy, and what it buys per latent position."""
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {acc}")
    p = min(1.0 - acc, acc)
    capacity = 1.0 - binary_entropy(p)
    rate = capacity / shape.f_hw ** 2
    return ChannelRates(p, capacity, rate, rate * shape.n)
