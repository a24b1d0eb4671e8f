import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrreg.similarity import gradient_correlation, ncc, sobel

images = arrays(np.float64, (8, 9), elements=st.floats(-10, 10, allow_nan=False, width=32))


def smooth_image(seed, shape=(32, 32)):
    y, x = np.mgrid[: shape[0], : shape[1]]
    r = np.random.default_rng(seed)
    cx, cy = r.uniform(8, 24, 2)
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / 40.0) + 0.3 * np.sin(x / 5.0 + r.uniform())


def test_ncc_examples():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, -a) == pytest.approx(-1.0)
    assert ncc(a, np.array([1.0, -1.0, -1.0, 1.0])) == pytest.approx(0.0)
    assert ncc(a, np.ones(4)) == 0.0


def test_ncc_input_checks():
    with pytest.raises(ValueError):
        ncc(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        ncc(np.zeros(1), np.zeros(1))


@settings(max_examples=200, deadline=None)
@given(images, images, st.floats(0.1, 10), st.floats(-5, 5))
def test_ncc_bounded_symmetric_affine_invariant(a, b, gain, offset):
    v = ncc(a, b)
    assert -1.0 <= v <= 1.0
    assert v == pytest.approx(ncc(b, a), abs=1e-12)
    if np.ptp(a) > 1e-3 and np.ptp(b) > 1e-3:
        assert ncc(gain * a + offset, b) == pytest.approx(v, abs=1e-9)


def test_sobel_of_ramp():
    img = np.tile(np.arange(6.0), (5, 1))
    gx, gy = sobel(img)
    assert np.allclose(gx[1:-1, 1:-1], 8.0)
    assert np.allclose(gy[1:-1, 1:-1], 0.0)


def test_gradient_correlation_identity_and_invariance():
    a = smooth_image(0)
    assert gradient_correlation(a, a) == pytest.approx(1.0)
    assert gradient_correlation(a, 3.0 * a + 7.0) == pytest.approx(1.0)
    assert gradient_correlation(a, -a) == pytest.approx(-1.0)


def test_gradient_correlation_drops_with_shift():
    a = smooth_image(1)
    vals = [gradient_correlation(a, np.roll(a, s, axis=1)) for s in (0, 1, 3)]
    assert vals[0] > vals[1] > vals[2]


def test_gradient_correlation_input_checks():
    with pytest.raises(ValueError):
        gradient_correlation(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        gradient_correlation(np.zeros((2, 4)), np.zeros((2, 4)))
