import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osimark.chanstats import (
    binary_entropy,
    bit_accuracy,
    bsc_rates,
    detect,
    fpr_grid,
    log_auc,
    null_tail,
    threshold_for_fpr,
    tpr_at_fpr,
    tpr_curve,
)
from osimark.wmcodec import LatentShape


def exact_tail(k, t):
    """P[Bin(k, 1/2) > t] in exact rational arithmetic."""
    if t >= k:
        return Fraction(0)
    j = max(t + 1, 0)
    term = total = math.comb(k, j)
    for j in range(j, k):
        term = term * (k - j) // (j + 1)
        total += term
    return Fraction(total, 2 ** k)


def exact_threshold(k, fpr, guess):
    """Smallest t with exact tail <= fpr, searched outward from ``guess``."""
    target = Fraction(fpr)
    t = guess
    while t < k and exact_tail(k, t) > target:
        t += 1
    while t > -1 and exact_tail(k, t - 1) <= target:
        t -= 1
    return t


@pytest.mark.parametrize("k,tau", [(16384, 0.5186), (4096, 0.5371), (1024, 0.5742), (256, 0.6484)])
def test_threshold_table(k, tau):
    got, t = threshold_for_fpr(k, 1e-6)
    assert round(got, 4) == tau
    assert t == exact_threshold(k, 1e-6, t)


@pytest.mark.parametrize("k", [1, 4, 7, 16, 64, 256, 1024])
@pytest.mark.parametrize("t", [-1, 0, 3, 10, 100])
def test_null_tail_matches_integer_oracle(k, t):
    t = min(t, k)
    assert null_tail(k, t) == pytest.approx(float(exact_tail(k, t)), rel=1e-10, abs=1e-300)


@given(st.integers(1, 300), st.floats(1e-9, 0.9))
@settings(max_examples=80, deadline=None)
def test_threshold_matches_exact_search(k, fpr):
    tau, t = threshold_for_fpr(k, fpr)
    expected = exact_threshold(k, fpr, t)
    # betainc rounding may shift a boundary case by one count; then both sides are within 1e-12
    if t != expected:
        assert abs(float(exact_tail(k, min(t, expected))) - fpr) < 1e-12 * max(fpr, 1)
    else:
        assert tau == t / k


def test_threshold_small_k_example():
    # k=4: P[X>2] = 5/16, P[X>3] = 1/16 <= 0.1
    assert threshold_for_fpr(4, 0.1) == (0.75, 3)
    assert threshold_for_fpr(4, 0.4) == (0.5, 2)


def test_threshold_rejects_bad_args():
    with pytest.raises(ValueError):
        threshold_for_fpr(0, 0.1)
    with pytest.raises(ValueError):
        threshold_for_fpr(10, 0.0)
    with pytest.raises(ValueError):
        threshold_for_fpr(10, 1.0)


def test_tpr_counts_strictly_above_threshold():
    tau, _ = threshold_for_fpr(256, 1e-6)
    accs = [tau, tau + 1 / 256, 1.0, 0.5]
    assert tpr_at_fpr(accs, 256, 1e-6) == 0.5
    with pytest.raises(ValueError):
        tpr_at_fpr([], 256, 1e-6)
    with pytest.raises(ValueError):
        tpr_at_fpr([1.2], 256, 1e-6)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.sampled_from([16, 256, 1024]))
@settings(max_examples=40, deadline=None)
def test_tpr_monotone_in_fpr(accs, k):
    curve = tpr_curve(accs, k, fpr_grid(12))
    assert np.all(np.diff(curve) >= 0)


def test_log_auc_hand_trapezoid():
    accs = [1.0, 0.9, 0.6, 0.55, 0.5]
    k = 1024
    fprs = np.logspace(-12, -1, 111)
    tpr = [np.mean(np.array(accs) > threshold_for_fpr(k, f)[0]) for f in fprs]
    x = np.log10(fprs)
    area = sum((x[i + 1] - x[i]) * (tpr[i] + tpr[i + 1]) / 2 for i in range(110))
    assert log_auc(accs, k) == pytest.approx(area / 11, abs=1e-12)
    assert log_auc([1.0], k) == pytest.approx(1.0)
    assert log_auc([0.5], k) == 0.0


def test_bit_accuracy_and_detect():
    assert bit_accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    assert np.allclose(bit_accuracy(np.zeros((2, 4)), [[0, 0, 1, 1], [0, 0, 0, 0]]), [0.5, 1.0])
    with pytest.raises(ValueError):
        bit_accuracy([1, 0], [1, 0, 1])
    wm = np.random.default_rng(0).integers(0, 2, 256)
    rep = detect(wm, wm, 1e-6)
    assert rep.detected and rep.k == 256 and rep.threshold_tau == pytest.approx(0.6484, abs=1e-4)
    assert not detect(wm, 1 - wm, 1e-6).detected


def test_binary_entropy_examples():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-4)


@pytest.mark.parametrize("acc,f,payload", [
    (0.6616, 1, 7.67), (0.7298, 2, 3.96), (0.8784, 4, 2.91), (0.9728, 8, 1.28),
    (0.7364, 1, 16.8), (0.8189, 2, 7.94), (0.9491, 4, 4.44), (0.9939, 8, 1.48),
])
def test_payload_rates(acc, f, payload):
    rates = bsc_rates(acc, LatentShape(4, 64, 64, f))
    assert 100 * rates.payload_rate == pytest.approx(payload, abs=0.05)
    assert rates.log2_users == pytest.approx(rates.payload_rate * 16384)


def test_bsc_examples():
    shape = LatentShape(4, 64, 64, 1)
    assert bsc_rates(1.0, shape).capacity == 1.0
    assert bsc_rates(0.5, shape).capacity == 0.0
    assert bsc_rates(0.5, shape).log2_users == 0.0
    with pytest.raises(ValueError):
        bsc_rates(1.5, shape)


@given(st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_bsc_symmetric_about_half(acc):
    shape = LatentShape(4, 64, 64, 2)
    a, b = bsc_rates(acc, shape), bsc_rates(1 - acc, shape)
    assert a.capacity == pytest.approx(b.capacity, abs=1e-12)
    assert 0 <= a.capacity <= 1


@given(st.floats(0.5, 1), st.floats(0.5, 1))
@settings(max_examples=100, deadline=None)
def test_capacity_monotone_above_half(a, b):
    shape = LatentShape(4, 64, 64, 1)
    lo, hi = sorted((a, b))
    assert bsc_rates(lo, shape).capacity <= bsc_rates(hi, shape).capacity + 1e-12
