"""Classical chrominance pulse projections: GREEN, CHROM, POS, and
RGB->YUV conversion.

Each operation takes one ROI's [3, T] trace (rows R, G, B) and is pure.
CHROM and POS both null any common-intensity waveform exactly and are
invariant to a common positive scaling of all three channels, which is
what makes them useful against motion and illumination distortions.
"""

import enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import TooShortInputError, WindowTooLongError, ZeroMeanChannelError

# Guard on standard deviations before forming std ratios.
EPS_STD = 1e-12

POS_WINDOW_S = 1.6  # sliding-window length of the POS projection

# BT.601 luma/chroma coefficients.
_KR, _KG, _KB = 0.299, 0.587, 0.114
_KU, _KV = 0.492, 0.877


class ChromaKind(enum.Enum):
    GREEN = "green"
    CHROM = "chrom"
    POS = "pos"
    YUV_U = "yuv_u"
    YUV_V = "yuv_v"


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    """Per-sample linear BT.601 conversion of a [3, T] trace."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[0], rgb[1], rgb[2]
    y = _KR * r + _KG * g + _KB * b
    u = _KU * (b - y)
    v = _KV * (r - y)
    return np.stack([y, u, v])


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_yuv (exact linear inverse)."""
    y, u, v = np.asarray(yuv, dtype=np.float64)
    r = y + v / _KV
    b = y + u / _KU
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b])


def green_channel(rgb: np.ndarray) -> np.ndarray:
    """G channel with its mean removed (drift retained; filtering is dsp's job)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    g = rgb[1]
    return g - g.mean()


def chrom_project(rgb: np.ndarray) -> np.ndarray:
    """CHROM pulse extraction (de Haan & Jeanne 2013 coefficient set).

    Channels are normalized by their temporal means, combined into
    X = 3Rn - 2Gn and Y = 1.5Rn + Gn - 1.5Bn, and mixed as
    S = X - (std(X)/std(Y)) * Y. If std(Y) is degenerate the ratio is
    treated as 0. The output is zero-meaned.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[1] < 2:
        raise TooShortInputError("chrom_project needs at least 2 samples")
    means = rgb.mean(axis=1)
    if np.any(np.abs(means) < EPS_STD):
        raise ZeroMeanChannelError("channel mean ~0; cannot normalize")
    rn, gn, bn = rgb / means[:, None]
    x = 3.0 * rn - 2.0 * gn
    y = 1.5 * rn + gn - 1.5 * bn
    sy = y.std()
    alpha = x.std() / sy if sy >= EPS_STD else 0.0
    s = x - alpha * y
    return s - s.mean()


def pos_project(rgb: np.ndarray, fs: float, win_s: float = POS_WINDOW_S) -> np.ndarray:
    """POS pulse extraction (Wang et al. 2017), overlap-added.

    Sliding windows of round(win_s*fs) frames, hop 1. Within each window
    the channels are normalized by their window means, projected onto
    S1 = Gn - Bn and S2 = Gn + Bn - 2Rn, mixed as
    h = S1 + (std(S1)/std(S2)) * S2, zero-meaned and accumulated into
    the output. Output length equals input length.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    t_len = rgb.shape[1]
    win = int(round(win_s * fs))
    if win < 2:
        raise WindowTooLongError(f"window of {win} frames is too short to project")
    if win > t_len:
        raise WindowTooLongError(f"window {win} frames > trace length {t_len}")

    sw = sliding_window_view(rgb, win, axis=1)  # [3, n_win, win]
    mu = sw.mean(axis=2)
    if np.any(np.abs(mu) < EPS_STD):
        raise ZeroMeanChannelError("window mean ~0; cannot normalize")
    cn = sw / mu[:, :, None]
    s1 = cn[1] - cn[2]  # [n_win, win]
    s2 = cn[1] + cn[2] - 2.0 * cn[0]
    sd1 = s1.std(axis=1)
    sd2 = s2.std(axis=1)
    alpha = np.where(sd2 >= EPS_STD, sd1 / np.where(sd2 >= EPS_STD, sd2, 1.0), 0.0)
    h = s1 + alpha[:, None] * s2
    h = h - h.mean(axis=1, keepdims=True)

    out = np.zeros(t_len)
    n_win = h.shape[0]
    idx = np.arange(n_win)[:, None] + np.arange(win)[None, :]
    np.add.at(out, idx.ravel(), h.ravel())
    return out
