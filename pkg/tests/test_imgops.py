import numpy as np
import pytest

from mire.errors import ConfigError
from mire.imgops import (bilinear_resize, crop_square, gaussian_blur,
                         gaussian_kernel_1d)


def test_kernel_normalized_and_symmetric():
    k = gaussian_kernel_1d(5, 1.5)
    assert abs(k.sum() - 1.0) < 1e-12
    assert np.abs(k - k[::-1]).max() < 1e-15
    assert k.argmax() == 2


def test_kernel_identity_cases():
    assert np.array_equal(gaussian_kernel_1d(1, 1.5), [1.0])
    assert np.array_equal(gaussian_kernel_1d(5, 0.0), [1.0])


def test_kernel_even_size_rejected():
    with pytest.raises(ConfigError):
        gaussian_kernel_1d(4, 1.0)


def test_blur_preserves_constants_and_range():
    img = np.full((3, 10, 10), 0.42)
    out = gaussian_blur(img, 5, 1.5)
    assert np.abs(out - 0.42).max() < 1e-12
    rnd = np.random.default_rng(0).uniform(size=(3, 10, 10))
    out = gaussian_blur(rnd, 5, 1.5)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_blur_matches_direct_convolution():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(7, 7))
    k = gaussian_kernel_1d(3, 1.0)
    kernel2d = np.outer(k, k)
    padded = np.pad(img, 1, mode="reflect")
    expect = np.zeros_like(img)
    for i in range(7):
        for j in range(7):
            expect[i, j] = (padded[i:i + 3, j:j + 3] * kernel2d).sum()
    got = gaussian_blur(img, 3, 1.0)
    assert np.abs(got - expect).max() < 1e-12


def test_resize_identity_same_size():
    img = np.random.default_rng(2).uniform(size=(3, 9, 9))
    assert bilinear_resize(img, 9, 9).tobytes() == img.tobytes()


def test_resize_constant_preserved():
    img = np.full((3, 5, 5), 0.7)
    out = bilinear_resize(img, 12, 12)
    assert np.abs(out - 0.7).max() < 1e-12


def test_resize_linear_ramp_exact():
    # bilinear interpolation reproduces an affine intensity field
    xs = (np.arange(8) + 0.5) / 8
    img = np.tile(xs, (8, 1))
    out = bilinear_resize(img, 4, 4)
    expect = np.tile((np.arange(4) + 0.5) / 4, (4, 1))
    assert np.abs(out - expect).max() < 1e-12


def test_crop_square():
    img = np.arange(2 * 5 * 5, dtype=float).reshape(2, 5, 5)
    out = crop_square(img, 1, 2, 3)
    assert np.array_equal(out, img[:, 1:4, 2:5])
