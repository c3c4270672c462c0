import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osimark.wmcodec import (
    LatentShape,
    majority_decode,
    pack_bits,
    repeat_expand,
    soft_decode,
    unpack_bits,
)


def test_shape_k_and_validation():
    assert LatentShape(4, 64, 64, 1).k == 16384
    assert LatentShape(4, 64, 64, 8).k == 256
    assert LatentShape(4, 16, 16, 8).k == 16
    with pytest.raises(ValueError):
        LatentShape(4, 6, 6, 4)
    with pytest.raises(ValueError):
        LatentShape(0, 4, 4)


def test_expand_identity_case():
    grid = repeat_expand(np.array([0, 1, 1, 0]), LatentShape(1, 2, 2, 1))
    assert grid.tolist() == [[[0, 1], [1, 0]]]


def test_expand_single_bit_tiling():
    grid = repeat_expand(np.array([1]), LatentShape(1, 2, 2, 2))
    assert grid.tolist() == [[[1, 1], [1, 1]]]


def test_expand_block_layout_bruteforce():
    shape = LatentShape(1, 4, 4, 2)
    wm = np.array([1, 0, 0, 1])
    grid = repeat_expand(wm, shape)
    for r, c in itertools.product(range(4), range(4)):
        assert grid[0, r, c] == wm[(r // 2) * 2 + (c // 2)]


def test_expand_multichannel_bruteforce():
    shape = LatentShape(3, 6, 9, 3)
    rng = np.random.default_rng(1)
    wm = rng.integers(0, 2, shape.k)
    grid = repeat_expand(wm, shape)
    hb, wb = 2, 3
    for ch, r, c in itertools.product(range(3), range(6), range(9)):
        assert grid[ch, r, c] == wm[ch * hb * wb + (r // 3) * wb + (c // 3)]


def test_expand_rejects_wrong_length():
    with pytest.raises(ValueError):
        repeat_expand(np.zeros(5), LatentShape(1, 2, 2, 1))


def test_majority_examples():
    shape = LatentShape(1, 2, 2, 2)
    assert majority_decode(np.array([[[1, 1], [0, 1]]]), shape).tolist() == [1]
    assert majority_decode(np.array([[[1, 1], [0, 0]]]), shape).tolist() == [0]
    g = np.array([[[0, 1], [1, 1]]])
    assert majority_decode(g, LatentShape(1, 2, 2, 1)).tolist() == [0, 1, 1, 1]


def test_majority_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        majority_decode(np.zeros((1, 3, 3)), LatentShape(1, 2, 2, 1))


def test_soft_examples():
    shape = LatentShape(1, 2, 2, 2)
    probs = np.array([[[0.9, 0.8], [0.4, 0.3]]])
    llr = sum(np.log(p / (1 - p)) for p in (0.9, 0.8, 0.4, 0.3))
    assert llr == pytest.approx(2.331, abs=1e-3)
    assert soft_decode(probs, shape).tolist() == [1]
    assert soft_decode(np.full((1, 2, 2), 0.5), shape).tolist() == [0]
    assert soft_decode(np.array([[[0.2]]]), LatentShape(1, 1, 1, 1)).tolist() == [0]


def test_soft_saturated_probs_are_finite():
    shape = LatentShape(1, 2, 2, 2)
    assert soft_decode(np.array([[[0.0, 1.0], [0.0, 0.0]]]), shape).tolist() == [0]
    assert soft_decode(np.array([[[1.0, 1.0], [1.0, 0.0]]]), shape).tolist() == [1]


def test_batched_roundtrip():
    shape = LatentShape(4, 8, 8, 2)
    wm = np.random.default_rng(0).integers(0, 2, (5, shape.k))
    assert np.array_equal(majority_decode(repeat_expand(wm, shape), shape), wm)


shapes = st.builds(
    lambda c, hb, wb, f: LatentShape(c, hb * f, wb * f, f),
    st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
)


@given(shapes, st.data())
@settings(max_examples=60, deadline=None)
def test_roundtrip_property(shape, data):
    wm = np.array(data.draw(st.lists(st.integers(0, 1), min_size=shape.k, max_size=shape.k)))
    assert np.array_equal(majority_decode(repeat_expand(wm, shape), shape), wm)


@given(st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_soft_matches_majority_on_saturated_probs(c, f, seed):
    shape = LatentShape(c, 2 * f, 2 * f, f)
    grid = np.random.default_rng(seed).integers(0, 2, shape.dims)
    probs = np.where(grid == 1, 1 - 1e-7, 1e-7)
    assert np.array_equal(soft_decode(probs, shape), majority_decode(grid, shape))


@given(st.sampled_from([1, 2, 3, 4]), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_minority_flips_never_change_bits(f, seed):
    shape = LatentShape(2, 2 * f, 2 * f, f)
    rng = np.random.default_rng(seed)
    wm = rng.integers(0, 2, shape.k)
    grid = repeat_expand(wm, shape)
    limit = -(-f * f // 2)  # ceil(f^2 / 2)
    n_flip = int(rng.integers(0, limit)) if limit > 0 else 0
    flipped = grid.copy()
    for ch, bi, bj in itertools.product(range(2), range(2), range(2)):
        cells = [(bi * f + a, bj * f + b) for a in range(f) for b in range(f)]
        for idx in rng.permutation(len(cells))[:n_flip]:
            r, col = cells[idx]
            flipped[ch, r, col] ^= 1
    assert np.array_equal(majority_decode(flipped, shape), wm)


def test_pack_bits_msb_first_zero_padded():
    assert pack_bits(np.array([1, 0, 1, 0, 0, 1, 0, 1])) == bytes([0xA5])
    assert pack_bits(np.array([1, 1, 1])) == bytes([0xE0])
    wm = np.random.default_rng(3).integers(0, 2, 19).astype(np.uint8)
    assert np.array_equal(unpack_bits(pack_bits(wm), 19), wm)
    with pytest.raises(ValueError):
        unpack_bits(b"\x00", 9)
