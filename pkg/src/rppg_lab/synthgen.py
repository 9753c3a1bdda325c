"""Synthetic BVP waveforms and facial-ROI color traces.

Desk-scale ground truth for every downstream test: controllable pulse,
respiration, illumination drift, per-ROI motion and sensor noise. All
generation is a pure function of the config (seed included).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

BASELINE = 128.0  # 8-bit mid-gray baseline for all channels
WALK_CLIP = 64.0  # motion random walk is clipped to +/- this


@dataclass
class BvpSignal:
    """Ground-truth blood-volume-pulse waveform (unit std, ~zero mean)."""

    samples: np.ndarray
    fs: float
    hr_gt: float
    rf_gt: float


@dataclass
class SynthConfig:
    """Parameters of one synthetic subject/clip.

    pulse_amp_rgb is in 8-bit intensity units per unit-std BVP; green is
    conventionally the largest. illum_drift is common-mode across all
    channels and ROIs, band-limited below 0.2 Hz. motion is a clipped
    Gaussian random walk per ROI, shared across that ROI's channels.
    """

    hr_bpm: float = 72.0
    rf_hz: float = 0.25
    duration_s: float = 10.0
    fs: float = 30.0
    n_rois: int = 25
    pulse_amp_rgb: tuple = (0.5, 1.0, 0.5)
    illum_drift_amp: float = 0.0
    motion_noise_std: float = 0.0
    white_noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not (36.0 <= self.hr_bpm <= 180.0):
            raise ConfigError(f"hr_bpm={self.hr_bpm} outside [36, 180]")
        if not (0.1 <= self.rf_hz <= 0.5):
            raise ConfigError(f"rf_hz={self.rf_hz} outside [0.1, 0.5]")
        if self.fs <= 0:
            raise ConfigError("fs must be positive")
        if self.duration_s * self.fs < 2 * self.fs:
            raise ConfigError("duration must be at least 2 s")
        if self.n_rois < 1:
            raise ConfigError("n_rois must be >= 1")
        amps = (*self.pulse_amp_rgb, self.illum_drift_amp, self.motion_noise_std, self.white_noise_std)
        if any(a < 0 for a in amps):
            raise ConfigError("amplitudes must be non-negative")


@dataclass
class RoiTraceSet:
    """Per-ROI, per-channel color time series: traces[roi][R,G,B][frame]."""

    traces: np.ndarray  # [n_rois, 3, T], values in [0, 255]
    fs: float
    label: BvpSignal | None = None

    @property
    def n_rois(self) -> int:
        return self.traces.shape[0]

    @property
    def n_frames(self) -> int:
        return self.traces.shape[2]


def gen_bvp(cfg: SynthConfig) -> BvpSignal:
    """Pulse waveform: fundamental + 0.3x second harmonic + 0.1x
    respiratory amplitude modulation, normalized to unit std."""
    cfg.validate()
    n = int(round(cfg.duration_s * cfg.fs))
    t = np.arange(n) / cfg.fs
    th = 2 * np.pi * (cfg.hr_bpm / 60.0) * t
    tr = 2 * np.pi * cfg.rf_hz * t
    x = np.sin(th) + 0.3 * np.sin(2 * th) + 0.1 * np.sin(tr) * np.sin(th)
    x = x - x.mean()
    x = x / x.std()
    return BvpSignal(samples=x, fs=cfg.fs, hr_gt=cfg.hr_bpm, rf_gt=cfg.rf_hz)


def _illum_drift(rng: np.random.Generator, n: int, fs: float, amp: float) -> np.ndarray:
    """Sum of three sub-0.2 Hz sinusoids with random freqs/phases, unit std."""
    freqs = rng.uniform(0.02, 0.18, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    t = np.arange(n) / fs
    d = np.zeros(n)
    for f, p in zip(freqs, phases):
        d += np.sin(2 * np.pi * f * t + p)
    sd = d.std()
    if sd > 0:
        d /= sd
    return amp * d


def gen_roi_traces(bvp: BvpSignal, cfg: SynthConfig) -> RoiTraceSet:
    """Turn a BVP waveform into noisy [n_rois, 3, T] color traces.

    trace[i][c][t] = 128 + pulse_amp[c]*bvp[t] + drift(t) + walk_i(t) + eps,
    clipped to [0, 255]. Drift is common to every channel and ROI; the
    walk is per-ROI, shared across channels; eps is i.i.d. Gaussian.
    """
    cfg.validate()
    if bvp.fs != cfg.fs:
        raise ConfigError(f"bvp.fs={bvp.fs} != cfg.fs={cfg.fs}")
    n = bvp.samples.size
    rng = np.random.default_rng(cfg.seed)

    drift = _illum_drift(rng, n, cfg.fs, cfg.illum_drift_amp)
    steps = rng.normal(0.0, cfg.motion_noise_std, size=(cfg.n_rois, n))
    walk = np.clip(np.cumsum(steps, axis=1), -WALK_CLIP, WALK_CLIP)
    eps = rng.normal(0.0, cfg.white_noise_std, size=(cfg.n_rois, 3, n))

    amp = np.asarray(cfg.pulse_amp_rgb, dtype=np.float64)
    traces = (
        BASELINE
        + amp[None, :, None] * bvp.samples[None, None, :]
        + drift[None, None, :]
        + walk[:, None, :]
        + eps
    )
    np.clip(traces, 0.0, 255.0, out=traces)
    return RoiTraceSet(traces=traces, fs=cfg.fs, label=bvp)
