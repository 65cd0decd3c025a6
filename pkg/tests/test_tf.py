import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hfodistill import tf
from hfodistill.data import HfoEvent, Window

FS = 2000
N = 1140


def _sine(f, amp=1.0):
    t = np.arange(N) / FS
    return amp * np.sin(2 * np.pi * f * t)


def test_zero_signal_zero_scalogram():
    assert np.all(tf.morlet_scalogram(np.zeros(N), FS) == 0.0)


@pytest.mark.parametrize("f", [20, 50, 100, 200, 250])
def test_peak_frequency_within_one_bin(f):
    freqs = tf.log_frequencies()
    s = tf.morlet_scalogram(_sine(f), FS)
    nearest = int(np.argmin(np.abs(np.log(freqs / f))))
    interior = s[:, N // 4: 3 * N // 4]
    peaks = np.argmax(interior, axis=0)
    assert np.all(np.abs(peaks - nearest) <= 1)


def test_sine_at_grid_frequency_has_unit_magnitude():
    f = tf.log_frequencies()[40]
    s = tf.morlet_scalogram(_sine(f), FS)
    assert s[40, N // 2] == pytest.approx(1.0, rel=1e-3)


def test_linearity_in_scale():
    x = np.random.default_rng(0).standard_normal(N)
    np.testing.assert_allclose(tf.morlet_scalogram(2 * x, FS), 2 * tf.morlet_scalogram(x, FS), rtol=1e-12)


@given(st.integers(0, 2**16))
def test_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(256), rng.standard_normal(256)
    lhs = tf.morlet_scalogram(a + b, FS, n_freqs=16)
    rhs = tf.morlet_scalogram(a, FS, n_freqs=16) + tf.morlet_scalogram(b, FS, n_freqs=16)
    assert np.all(lhs <= rhs + 1e-9)


def test_nyquist_violation():
    with pytest.raises(ValueError):
        tf.morlet_scalogram(np.zeros(100), 500)


def test_resize_hand_computed_centre():
    out = tf.resize_bilinear(np.array([[0.0, 1.0], [1.0, 0.0]]), 3, 3)
    assert out[1, 1] == 0.5
    np.testing.assert_array_equal(out[[0, 0, 2, 2], [0, 2, 0, 2]], [0, 1, 1, 0])


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(-5, 5)))
def test_resize_same_shape_identity(m):
    np.testing.assert_array_equal(tf.resize_bilinear(m, *m.shape), m)


def test_resize_constant():
    assert np.all(tf.resize_bilinear(np.full((5, 300), 3.5), 64, 64) == 3.5)


def test_normalize_hand_computed():
    e = np.e
    values, lo, hi = tf.normalize(np.array([[0.0, e - 1], [e ** 2 - 1, 0.0]]))
    np.testing.assert_allclose(values, [[0, 0.5], [1, 0]], atol=1e-15)
    assert (lo, hi) == (0.0, pytest.approx(2.0))


def test_normalize_constant_and_nan():
    assert np.all(tf.normalize(np.zeros((3, 3)))[0] == 0)
    with pytest.raises(ValueError):
        tf.normalize(np.array([[np.nan]]))


@given(arrays(np.float64, (4, 6), elements=st.floats(0, 1e6)))
def test_normalize_range(m):
    v = tf.normalize(m)[0]
    assert v.min() == 0.0
    assert v.max() == (0.0 if np.ptp(np.log1p(m)) == 0 else 1.0)


def test_window_to_image_orientation_and_axes():
    img = tf.window_to_image(_sine(250.0), FS)
    assert img.values.shape == (64, 64)
    assert np.all(np.diff(img.freq_axis) < 0) and np.all(np.diff(img.time_axis) > 0)
    # high frequency sine lights up the top rows
    assert np.argmax(img.values[:, 32]) < 10


def test_images_deterministic():
    w = Window(HfoEvent("s", "c", 0, 1), np.random.default_rng(1).standard_normal(N), 0.5, FS)
    a = tf.images_from_windows([w, w])
    assert a.dtype == np.float32 and a[0].tobytes() == a[1].tobytes()


def test_pgm_round_trip_and_dump(tmp_path):
    img = tf.window_to_image(_sine(100.0), FS)
    tf.write_tf_dump(tmp_path, "ev", img)
    back = tf.read_pgm(tmp_path / "ev.pgm")
    assert np.max(np.abs(back - img.values)) <= 0.5 / 255 + 1e-12
    assert (tmp_path / "ev.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")
    assert (tmp_path / "ev.axes.csv").read_text().splitlines()[0] == "index,freq_hz,time_ms"
