"""Morlet scalograms of event windows, resized and normalised to 64x64 images.

Frequency rows are ordered high to low (row 0 is ``f_max``), matching the
orientation of the PGM dumps.  Time columns are milliseconds relative to the
window centre.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

MORLET_OMEGA0 = 6.0
F_MIN = 10.0
F_MAX = 290.0
IMAGE_SIZE = 64


@dataclass(frozen=True)
class TFImage:
    values: np.ndarray = field(repr=False)
    freq_axis: np.ndarray = field(repr=False)  # Hz, descending
    time_axis: np.ndarray = field(repr=False)  # ms from window centre, ascending
    log_min: float = 0.0
    log_max: float = 0.0


def log_frequencies(f_min: float = F_MIN, f_max: float = F_MAX, n_freqs: int = IMAGE_SIZE) -> np.ndarray:
    """Ascending, logarithmically spaced centre frequencies."""
    return np.geomspace(f_min, f_max, n_freqs)


def morlet_scalogram(window, fs: float, f_min: float = F_MIN, f_max: float = F_MAX,
                     n_freqs: int = IMAGE_SIZE, omega0: float = MORLET_OMEGA0) -> np.ndarray:
    """Magnitude of the analytic Morlet transform, shape ``(n_freqs, len(window))``.

    Rows follow :func:`log_frequencies` (ascending).  Filters are built in the
    frequency domain with peak gain 2, so a sine of amplitude A at a grid
    frequency yields magnitude A.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("window must be a non-empty 1-d array")
    if fs <= 2 * f_max:
        raise ValueError(f"sample rate {fs} Hz is below the Nyquist rate for f_max={f_max} Hz")
    if n_freqs < 2:
        raise ValueError("n_freqs must be at least 2")
    n = x.size
    filters, nfft = _filter_bank(n, float(fs), float(f_min), float(f_max), int(n_freqs), float(omega0))
    spectrum = sfft.fft(x, nfft)
    coeffs = sfft.ifft(spectrum[None, :] * filters, axis=1)[:, :n]
    return np.abs(coeffs)


@functools.lru_cache(maxsize=8)
def _filter_bank(n: int, fs: float, f_min: float, f_max: float, n_freqs: int, omega0: float):
    freqs = log_frequencies(f_min, f_max, n_freqs)
    # zero padding of >= n samples keeps the circular wrap inside the padding
    nfft = sfft.next_fast_len(2 * n + int(np.ceil(8 * omega0 / (2 * np.pi * f_min) * fs)))
    omega = 2 * np.pi * sfft.fftfreq(nfft, d=1.0 / fs)
    scales = omega0 / (2 * np.pi * freqs)
    arg = scales[:, None] * omega[None, :] - omega0
    filters = np.where(omega[None, :] > 0, 2.0 * np.exp(-0.5 * arg ** 2), 0.0)
    filters.setflags(write=False)
    return filters, nfft


def resize_bilinear(matrix, out_h: int = IMAGE_SIZE, out_w: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resampling with corner-aligned grids."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise ValueError("matrix must be 2-d with non-empty dimensions")
    h, w = a.shape
    if (h, w) == (out_h, out_w):
        return a.copy()

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.linspace(0.0, n_in - 1.0, n_out)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = coords(h, out_h)
    c0, c1, fc = coords(w, out_w)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bottom = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bottom * fr[:, None]


def normalize(matrix) -> tuple[np.ndarray, float, float]:
    """``log1p`` then per-image min-max scaling to ``[0, 1]``.

    Returns the scaled matrix and the log-domain ``(min, max)`` used.  A
    constant input maps to all zeros.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot normalise non-finite values")
    logged = np.log1p(a)
    lo, hi = float(logged.min()), float(logged.max())
    if hi == lo:
        return np.zeros_like(logged), lo, hi
    return (logged - lo) / (hi - lo), lo, hi


def window_to_image(window, fs: float, size: int = IMAGE_SIZE, f_min: float = F_MIN,
                    f_max: float = F_MAX, omega0: float = MORLET_OMEGA0) -> TFImage:
    x = np.asarray(window, dtype=np.float64)
    raw = morlet_scalogram(x, fs, f_min, f_max, size, omega0)[::-1]
    values, lo, hi = normalize(resize_bilinear(raw, size, size))
    freqs = log_frequencies(f_min, f_max, size)[::-1].copy()
    t = (np.arange(x.size) - x.size / 2.0) * 1000.0 / fs
    times = np.linspace(t[0], t[-1], size) if x.size > 1 else np.zeros(size)
    return TFImage(values, freqs, times, lo, hi)


def images_from_windows(windows, size: int = IMAGE_SIZE, **kwargs) -> np.ndarray:
    """Stack of normalised images, shape ``(n, size, size)``, float32."""
    out = np.empty((len(windows), size, size), dtype=np.float32)
    for i, w in enumerate(windows):
        out[i] = window_to_image(w.samples, w.sample_rate, size, **kwargs).values
    return out


def write_pgm(path, values) -> None:
    """8-bit binary PGM of an image with values in ``[0, 1]``."""
    a = np.asarray(values, dtype=np.float64)
    pix = np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    pix = np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float64) / maxval


def write_tf_dump(directory, name: str, image: TFImage) -> None:
    directory = Path(directory)
    write_pgm(directory / f"{name}.pgm", image.values)
    with open(directory / f"{name}.axes.csv", "w", encoding="utf-8") as fh:
        fh.write("index,freq_hz,time_ms\n")
        for i, (f, t) in enumerate(zip(image.freq_axis, image.time_axis)):
            fh.write(f"{i},{f!r},{t!r}\n")
