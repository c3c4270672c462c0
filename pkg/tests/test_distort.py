import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osimark.distort import (
    BscSpec,
    DistortionSpec,
    Kind,
    apply,
    apply_batch,
    bilinear_resize,
    bsc_flip,
    default_suite,
    jpeg_roundtrip,
    jpeg_table,
    load_suite,
    save_suite,
)


def image(seed=0, shape=(3, 16, 16)):
    return np.random.default_rng(seed).random(shape)


def test_default_suite_settings():
    suite = default_suite()
    assert [s.name for s in suite] == [
        "RandDrop", "RandCrop", "Resize", "Jpeg", "Bright", "GausBlur", "GausStd", "MedBlur", "SPNoise"]
    assert [s.param for s in suite] == [0.8, 0.6, 0.25, 25, 6, 4, 0.05, 7, 0.05]


def test_identity_and_neutral_params():
    img = image()
    assert np.array_equal(apply(img, DistortionSpec(Kind.IDENTITY, 0)), img)
    assert np.array_equal(apply(img, DistortionSpec(Kind.BRIGHT, 1)), img)
    assert np.array_equal(apply(img, DistortionSpec(Kind.GAUS_BLUR, 0)), img)
    assert np.array_equal(apply(img, DistortionSpec(Kind.RAND_DROP, 0)), img)
    assert np.array_equal(apply(img, DistortionSpec(Kind.RAND_CROP, 1)), img)
    assert np.allclose(apply(img, DistortionSpec(Kind.RESIZE, 1)), img)
    assert np.array_equal(apply(img, DistortionSpec(Kind.SP_NOISE, 0)), img)
    assert DistortionSpec(Kind.IDENTITY, 0).name == "Clean"


def test_invalid_params_rejected():
    for kind, p in [(Kind.RAND_DROP, 1.5), (Kind.RESIZE, 0), (Kind.JPEG, 0),
                    (Kind.MED_BLUR, 4), (Kind.GAUS_STD, -1), (Kind.BRIGHT, -2)]:
        with pytest.raises(ValueError):
            DistortionSpec(kind, p)
    with pytest.raises(ValueError):
        apply(np.zeros((4, 4)), DistortionSpec(Kind.BRIGHT, 1))


def test_bright_clips():
    img = np.full((3, 4, 4), 0.4)
    assert np.all(apply(img, DistortionSpec(Kind.BRIGHT, 6)) == 1.0)
    assert np.allclose(apply(img, DistortionSpec(Kind.BRIGHT, 2)), 0.8)


def test_rand_drop_exact_fraction_all_channels():
    img = np.ones((3, 10, 10))
    out = apply(img, DistortionSpec(Kind.RAND_DROP, 0.8, seed=1))
    dropped = out[0] == 0
    assert dropped.sum() == 80
    assert np.array_equal(out[1] == 0, dropped) and np.array_equal(out[2] == 0, dropped)


def test_rand_crop_keeps_one_window():
    img = np.ones((3, 20, 20))
    out = apply(img, DistortionSpec(Kind.RAND_CROP, 0.64, seed=3))
    rows = np.where(out[0].any(axis=1))[0]
    cols = np.where(out[0].any(axis=0))[0]
    assert len(rows) == 16 and len(cols) == 16
    assert out[0].sum() == 256
    # a different seed moves the window somewhere else (at least for some seed)
    assert any(not np.array_equal(apply(img, DistortionSpec(Kind.RAND_CROP, 0.64, seed=s)), out)
               for s in range(4, 10))


def test_median_against_bruteforce():
    img = image(1, (1, 9, 11))
    out = apply(img, DistortionSpec(Kind.MED_BLUR, 3))
    padded = np.pad(img[0], 1, mode="symmetric")  # scipy "reflect" repeats the edge pixel
    for r, c in itertools.product(range(9), range(11)):
        assert out[0, r, c] == np.median(padded[r:r + 3, c:c + 3])


def test_gaussian_blur_against_direct_kernel():
    img = image(2, (1, 32, 32))
    sigma = 1.5
    out = apply(img, DistortionSpec(Kind.GAUS_BLUR, sigma))
    radius = int(3 * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    k /= k.sum()
    padded = np.pad(img[0], radius, mode="symmetric")
    r, c = 16, 10
    patch = padded[r:r + 2 * radius + 1, c:c + 2 * radius + 1]
    assert out[0, r, c] == pytest.approx(k @ patch @ k, abs=1e-12)


def test_gaussian_blur_preserves_constant():
    img = np.full((3, 12, 12), 0.3)
    assert np.allclose(apply(img, DistortionSpec(Kind.GAUS_BLUR, 4)), 0.3)
    assert np.allclose(apply(img, DistortionSpec(Kind.MED_BLUR, 7)), 0.3)


def test_resize_roundtrip_of_constant_and_downscale():
    img = np.full((3, 8, 8), 0.7)
    assert np.allclose(bilinear_resize(img, 2, 2), 0.7)
    ramp = np.tile(np.arange(4.0), (1, 4, 1))
    assert np.allclose(bilinear_resize(ramp, 4, 2)[0, 0], [0.5, 2.5])


def test_jpeg_table_scaling():
    assert np.array_equal(jpeg_table(50), np.clip(np.floor((jpeg_table(50) * 100 + 50) / 100), 1, 255))
    assert jpeg_table(100).max() == 1
    assert jpeg_table(25)[0, 0] == 32


def test_jpeg_keeps_flat_blocks_and_degrades_with_quality():
    flat = np.full((3, 16, 16), 128 / 255)
    assert np.allclose(jpeg_roundtrip(flat, 25), flat)
    img = image(3)
    err = [np.abs(apply(img, DistortionSpec(Kind.JPEG, q)) - img).mean() for q in (95, 50, 10)]
    assert err[0] < err[1] < err[2]


def test_gaussian_noise_statistics():
    img = np.full((3, 64, 64), 0.5)
    out = apply(img, DistortionSpec(Kind.GAUS_STD, 0.05, seed=0))
    assert abs((out - 0.5).std() - 0.05) < 0.003


def test_salt_pepper_rate():
    img = np.full((3, 100, 100), 0.5)
    out = apply(img, DistortionSpec(Kind.SP_NOISE, 0.05, seed=0))
    hit = out[0] != 0.5
    assert abs(hit.mean() - 0.05) < 0.01
    assert set(np.unique(out[:, hit])) <= {0.0, 1.0}


@pytest.mark.parametrize("spec", default_suite(5), ids=lambda s: s.name)
def test_outputs_in_range_and_shape(spec):
    img = image(4, (3, 24, 32))
    out = apply(img, spec)
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("spec", default_suite(5), ids=lambda s: s.name)
def test_seed_reproducibility(spec):
    img = image(5)
    assert np.array_equal(apply(img, spec), apply(img, spec))


def test_batch_uses_per_image_seeds():
    spec = DistortionSpec(Kind.GAUS_STD, 0.1, seed=10)
    imgs = np.stack([image(6)] * 3)
    out = apply_batch(imgs, spec, base_index=2)
    assert np.array_equal(out[1], apply(imgs[1], spec.with_seed(13)))
    assert not np.array_equal(out[0], out[1])


def test_suite_file_roundtrip(tmp_path):
    path = tmp_path / "suite.json"
    save_suite(path, default_suite(3))
    assert load_suite(path) == default_suite(3)


def test_bsc_flip_rate_and_endpoints():
    mask = np.ones(10 ** 5, dtype=np.int8)
    out = bsc_flip(mask, BscSpec(0.1, seed=1))
    assert abs(np.mean(out == -1) - 0.1) < 0.005
    assert np.array_equal(bsc_flip(mask, BscSpec(0.0)), mask)
    with pytest.raises(ValueError):
        BscSpec(0.6)


@given(st.floats(0, 0.5), st.floats(0, 0.5))
@settings(max_examples=10, deadline=None)
def test_bsc_composition(p1, p2):
    mask = np.ones(2 * 10 ** 5, dtype=np.int8)
    out = bsc_flip(bsc_flip(mask, BscSpec(p1, 1)), BscSpec(p2, 2))
    expected = p1 + p2 - 2 * p1 * p2
    assert abs(np.mean(out == -1) - expected) < 0.006
