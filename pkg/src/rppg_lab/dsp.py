"""Deterministic signal kernels shared by every pipeline stage.

Resampling, zero-phase band-pass filtering, Pearson correlation and
power spectral density. All functions are pure and thread-safe.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import butter, sosfiltfilt

from .errors import ConfigError, InvalidBandError, LengthMismatchError, TooShortInputError

# Variance below this is treated as degenerate (constant signal).
EPS_VAR = 1e-12


@dataclass
class Spectrum:
    """One-sided periodogram: freqs start at 0 Hz, uniform spacing fs/n_fft."""

    freqs: np.ndarray
    power: np.ndarray
    fs: float

    def band_power(self, lo: float, hi: float) -> float:
        """Total power of bins with lo <= f <= hi."""
        sel = (self.freqs >= lo) & (self.freqs <= hi)
        return float(np.sum(self.power[sel]))


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


def resample_cubic_spline(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Resample a uniformly sampled signal with a natural cubic spline.

    The output grid starts at t=0 and covers the same time range
    (no extrapolation). fs_in == fs_out returns a copy of the input.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 4:
        raise TooShortInputError(f"need >= 4 samples to fit a cubic spline, got {x.size}")
    if fs_in <= 0 or fs_out <= 0:
        raise ConfigError("sample rates must be positive")
    if fs_in == fs_out:
        return x.copy()
    t_in = np.arange(x.size) / fs_in
    spline = CubicSpline(t_in, x, bc_type="natural")
    t_end = t_in[-1]
    n_out = int(np.floor(t_end * fs_out + 1e-9)) + 1
    t_out = np.arange(n_out) / fs_out
    return spline(t_out)


def butterworth_bandpass(
    x: np.ndarray, fs: float, lo: float = 0.6, hi: float = 3.0, order: int = 4
) -> np.ndarray:
    """Zero-phase Butterworth band-pass via cascaded second-order sections.

    `order` is the order of the band-pass filter itself (must be even);
    forward-backward application doubles the effective attenuation and
    cancels phase distortion. Output length equals input length.
    """
    x = np.asarray(x, dtype=np.float64)
    if not (0 < lo < hi):
        raise InvalidBandError(f"need 0 < lo < hi, got lo={lo}, hi={hi}")
    if hi >= fs / 2:
        raise InvalidBandError(f"hi={hi} must be below Nyquist {fs / 2}")
    if order < 2 or order % 2 != 0:
        raise ConfigError(f"order must be a positive even integer, got {order}")
    sos = butter(order // 2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return sosfiltfilt(sos, x)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation with a degenerate-variance guard.

    Returns 0.0 when either input has variance < EPS_VAR, so constant
    rows never produce NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatchError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise LengthMismatchError("need at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    n = x.size
    var_x = float(xc @ xc) / (n - 1)
    var_y = float(yc @ yc) / (n - 1)
    if var_x < EPS_VAR or var_y < EPS_VAR:
        return 0.0
    r = float(xc @ yc) / np.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(np.clip(r, -1.0, 1.0))


def psd(x: np.ndarray, fs: float) -> Spectrum:
    """Hann-windowed periodogram of the zero-meaned signal.

    Zero-padded to the next power of two, so bin spacing is fs / n_fft.
    Power is scaled so the total equals the mean square of the windowed
    signal (Parseval).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 16:
        raise TooShortInputError(f"psd needs >= 16 samples, got {x.size}")
    n = x.size
    xw = (x - x.mean()) * np.hanning(n)
    n_fft = next_pow2(n)
    spec = np.fft.rfft(xw, n_fft)
    power = np.abs(spec) ** 2
    scale = np.full(power.shape, 2.0)
    scale[0] = 1.0
    if n_fft % 2 == 0:
        scale[-1] = 1.0
    power = power * scale / (n_fft * n)
    freqs = np.arange(power.size) * fs / n_fft
    return Spectrum(freqs=freqs, power=power, fs=float(fs))
