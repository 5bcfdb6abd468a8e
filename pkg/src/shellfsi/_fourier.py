"""Fourier utilities on the periodic unit square.

Grids are N x N with sample positions ((i + offset) / N, (j + offset) / N).
Fields are indexed ``[i, j]`` with ``i`` along y1.
"""
import numpy as np


def wavenumbers(n):
    """Angular wavenumbers 2*pi*k in numpy FFT order."""
    return 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)


def _odd_wavenumbers(n):
    k = wavenumbers(n)
    if n % 2 == 0:
        k[n // 2] = 0.0  # Nyquist mode has no real odd derivative
    return k


def k_squared(n):
    k = wavenumbers(n)
    return k[:, None] ** 2 + k[None, :] ** 2


def laplacian(values):
    n = values.shape[0]
    return np.real(np.fft.ifft2(-k_squared(n) * np.fft.fft2(values)))


def bilaplacian(values):
    n = values.shape[0]
    return np.real(np.fft.ifft2(k_squared(n) ** 2 * np.fft.fft2(values)))


def gradient(values):
    """Spectral (d/dy1, d/dy2) of a periodic field."""
    n = values.shape[0]
    k = _odd_wavenumbers(n)
    hat = np.fft.fft2(values)
    d1 = np.real(np.fft.ifft2(1j * k[:, None] * hat))
    d2 = np.real(np.fft.ifft2(1j * k[None, :] * hat))
    return d1, d2


def remove_mean(values):
    return values - values.mean()


def shift(values, s1, s2):
    """Sample the trigonometric interpolant at positions shifted by (s1, s2) cells.

    The Nyquist mode is treated as a cosine, so half-cell shifts of it are
    not invertible; fields used with this routine should be band-limited.
    """
    n = values.shape[0]
    k = _odd_wavenumbers(n)
    kk = wavenumbers(n)
    hat = np.fft.fft2(values)
    ph1 = np.exp(1j * k * s1 / n)
    ph2 = np.exp(1j * k * s2 / n)
    out = hat * ph1[:, None] * ph2[None, :]
    if n % 2 == 0:
        c1 = np.cos(kk[n // 2] * s1 / n)
        c2 = np.cos(kk[n // 2] * s2 / n)
        out[n // 2, :] = hat[n // 2, :] * c1 * ph2
        out[:, n // 2] = hat[:, n // 2] * ph1 * c2
        out[n // 2, n // 2] = hat[n // 2, n // 2] * c1 * c2
    return np.real(np.fft.ifft2(out))


def _axis_matrix(n, coords, offset):
    """E[m, k] for symmetric modes k = -n/2 .. n/2 (Nyquist split in half)."""
    if n % 2 == 0:
        ks = np.arange(-n // 2, n // 2 + 1)
    else:
        ks = np.arange(-(n // 2), n // 2 + 1)
    e = np.exp(2j * np.pi * np.outer(coords - offset / n, ks))
    return ks, e


def evaluate(values, points, offset=0.0):
    """Evaluate the trigonometric interpolant at arbitrary points (..., 2)."""
    n = values.shape[0]
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 2)
    hat = np.fft.fft2(values) / n**2
    ks, e1 = _axis_matrix(n, flat[:, 0], offset)
    _, e2 = _axis_matrix(n, flat[:, 1], offset)
    idx = np.mod(ks, n)
    coef = hat[np.ix_(idx, idx)].copy()
    if n % 2 == 0:
        coef[0, :] *= 0.5
        coef[-1, :] *= 0.5
        coef[:, 0] *= 0.5
        coef[:, -1] *= 0.5
    out = np.einsum("mk,kl,ml->m", e1, coef, e2, optimize=True)
    return np.real(out).reshape(pts.shape[:-1])


def refine(values, factor, offset=0.0):
    """Resample onto an (factor*N)^2 grid with positions m / (factor*N)."""
    n = values.shape[0]
    m = factor * n
    y = np.arange(m) / m
    hat = np.fft.fft2(values) / n**2
    ks, e = _axis_matrix(n, y, offset)
    idx = np.mod(ks, n)
    coef = hat[np.ix_(idx, idx)].copy()
    if n % 2 == 0:
        coef[0, :] *= 0.5
        coef[-1, :] *= 0.5
        coef[:, 0] *= 0.5
        coef[:, -1] *= 0.5
    return np.real(e @ coef @ e.T)
