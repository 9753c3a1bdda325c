"""Spatio-temporal maps: construction, augmentation variants, cropping,
row resizing, random patch masking, and the on-disk formats.

A base STMap is [n_rois, T, 3] (rows = ROIs, columns = frames); after
row resizing a clip is square [T, T, C]. Combined variants concatenate
two base variants on the channel axis (C = 6). Every row of every
channel is independently min-max normalized to [0, 1]; constant rows
normalize to 0.5.
"""

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import chroma, dsp
from .errors import (
    BadMagicError,
    ConfigError,
    IndivisiblePatchSizeError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .synthgen import BvpSignal, RoiTraceSet

STMAP_MAGIC = b"STMP"
TRACE_MAGIC = b"ROIT"
FORMAT_VERSION = 1

PULSE_BAND = (0.6, 3.0)  # Hz, pass-band of the Filtered variant


class Variant(enum.Enum):
    """STMap variant tags (also the u32 tag in the file format)."""

    ORIGINAL = 0
    CHROM = 1
    POS = 2
    FILTERED = 3
    OC = 4
    OP = 5
    OF = 6
    PC = 7
    CF = 8
    PF = 9

    @property
    def is_combined(self) -> bool:
        return self.value >= Variant.OC.value

    @property
    def channels(self) -> int:
        return 6 if self.is_combined else 3

    @classmethod
    def parse(cls, name: str) -> "Variant":
        try:
            return cls[name.upper()]
        except KeyError:
            legal = ", ".join(v.name for v in cls)
            raise ConfigError(f"unknown STMap variant '{name}'; legal: {legal}") from None


# Combined variant = channel concat of (first, second) base variants.
COMBINATIONS = {
    (Variant.ORIGINAL, Variant.CHROM): Variant.OC,
    (Variant.ORIGINAL, Variant.POS): Variant.OP,
    (Variant.ORIGINAL, Variant.FILTERED): Variant.OF,
    (Variant.POS, Variant.CHROM): Variant.PC,
    (Variant.CHROM, Variant.FILTERED): Variant.CF,
    (Variant.POS, Variant.FILTERED): Variant.PF,
}


@dataclass
class STMap:
    data: np.ndarray  # [H, W, C], values in [0, 1]
    fs: float
    variant: Variant

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class MaskPlan:
    """Shuffled partition of the patch grid into kept and masked indices."""

    patch_size: int
    grid: int  # patches per side
    kept_indices: np.ndarray
    masked_indices: np.ndarray
    seed: int

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def shuffle_order(self) -> np.ndarray:
        """Kept indices followed by masked indices (the shuffle permutation)."""
        return np.concatenate([self.kept_indices, self.masked_indices])

    def ids_restore(self) -> np.ndarray:
        """For canonical patch i, its position in shuffle_order()."""
        return np.argsort(self.shuffle_order(), kind="stable")

    def kept_flags(self) -> np.ndarray:
        """Boolean [n_patches], True where the patch is kept (visible)."""
        flags = np.zeros(self.n_patches, dtype=bool)
        flags[self.kept_indices] = True
        return flags


@dataclass
class StmapClipSet:
    """Clips cropped from one source video, plus optional aligned labels."""

    clips: list
    source_id: str
    labels: list | None = None  # aligned BVP segments, one per clip
    hr_gt: float | None = None
    rf_gt: float | None = None


def _minmax_rows(data: np.ndarray) -> np.ndarray:
    """Min-max each (row, channel) time series to [0, 1]; constants -> 0.5."""
    lo = data.min(axis=1, keepdims=True)
    hi = data.max(axis=1, keepdims=True)
    span = hi - lo
    degenerate = span < 1e-12
    out = (data - lo) / np.where(degenerate, 1.0, span)
    return np.where(degenerate, 0.5, out)


def build_base_stmap(
    traces: RoiTraceSet,
    variant: Variant,
    aug_channels: str = "eq1",
    pos_win_s: float = chroma.POS_WINDOW_S,
) -> STMap:
    """Build one of the four base variants from ROI traces (pre-resize).

    Channel composition:
      ORIGINAL -> (B, R, G)
      CHROM    -> (chrom, R, G)   or (chrom, U, V) with aug_channels="yuv"
      POS      -> (pos, R, G)     or (pos, U, V)
      FILTERED -> band-passed (R, G, B), band [0.6, 3] Hz

    Projections run on the raw traces; each row/channel is then min-max
    normalized to [0, 1].
    """
    if variant.is_combined:
        raise ConfigError(f"{variant.name} is a combined variant; use build_combined_stmap")
    if aug_channels not in ("eq1", "yuv"):
        raise ConfigError(f"aug_channels must be 'eq1' or 'yuv', got '{aug_channels}'")
    arr = traces.traces  # [n, 3, T]
    n, _, t_len = arr.shape
    out = np.empty((n, t_len, 3), dtype=np.float64)
    for i in range(n):
        r, g, b = arr[i]
        if variant == Variant.ORIGINAL:
            rows = (b, r, g)
        elif variant == Variant.FILTERED:
            rows = (
                dsp.butterworth_bandpass(r, traces.fs, *PULSE_BAND),
                dsp.butterworth_bandpass(g, traces.fs, *PULSE_BAND),
                dsp.butterworth_bandpass(b, traces.fs, *PULSE_BAND),
            )
        else:
            if variant == Variant.CHROM:
                pulse = chroma.chrom_project(arr[i])
            else:
                pulse = chroma.pos_project(arr[i], traces.fs, pos_win_s)
            if aug_channels == "eq1":
                rows = (pulse, r, g)
            else:
                yuv = chroma.rgb_to_yuv(arr[i])
                rows = (pulse, yuv[1], yuv[2])
        out[i] = np.stack(rows, axis=-1)
    return STMap(data=_minmax_rows(out), fs=traces.fs, variant=variant)


def build_combined_stmap(a: STMap, b: STMap) -> STMap:
    """Concatenate two base maps on the channel axis (a's channels first)."""
    key = (a.variant, b.variant)
    if key not in COMBINATIONS:
        legal = ", ".join(f"{x.name}+{y.name}" for x, y in COMBINATIONS)
        raise ConfigError(f"no combined variant for {key[0].name}+{key[1].name}; legal: {legal}")
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ShapeMismatchError(f"map shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.fs != b.fs:
        raise ShapeMismatchError(f"sample rates differ: {a.fs} vs {b.fs}")
    data = np.concatenate([a.data, b.data], axis=2)
    return STMap(data=data, fs=a.fs, variant=COMBINATIONS[key])


def crop_windows(large: STMap, clip_len: int, step: int) -> StmapClipSet:
    """Crop a large map into floor((T_L - T)/s) + 1 clips of width T."""
    t_total = large.width
    if clip_len > t_total:
        raise ConfigError(f"clip length {clip_len} > source width {t_total}")
    if step < 1:
        raise ConfigError("step must be >= 1")
    n_clips = (t_total - clip_len) // step + 1
    clips = [
        STMap(
            data=large.data[:, k * step : k * step + clip_len, :].copy(),
            fs=large.fs,
            variant=large.variant,
        )
        for k in range(n_clips)
    ]
    return StmapClipSet(clips=clips, source_id="", labels=None)


def resize_rows(clip: np.ndarray, target: int | None = None) -> np.ndarray:
    """Bilinear interpolation along the ROI axis only: [N, T, C] -> [target, T, C].

    target defaults to T (square output). The time axis is untouched.
    """
    clip = np.asarray(clip, dtype=np.float64)
    n = clip.shape[0]
    if n < 2:
        raise ConfigError("need at least 2 ROI rows to resize")
    if target is None:
        target = clip.shape[1]
    pos = np.linspace(0.0, n - 1, target)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = (pos - i0)[:, None, None]
    return (1.0 - frac) * clip[i0] + frac * clip[i1]


def kept_count(grid: int, mask_ratio: float) -> int:
    """L_k = floor((1 - R_m) * G^2)."""
    return int(math.floor((1.0 - mask_ratio) * grid * grid))


def make_mask_plan(side: int, patch_size: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Shuffle the patch grid and keep the first floor((1-R_m)*G^2) indices."""
    if patch_size < 1 or side % patch_size != 0:
        raise IndivisiblePatchSizeError(f"side {side} not divisible by patch size {patch_size}")
    if not (0.0 < mask_ratio < 1.0):
        raise ConfigError(f"mask ratio must be in (0, 1), got {mask_ratio}")
    grid = side // patch_size
    perm = np.random.default_rng(seed).permutation(grid * grid)
    n_keep = kept_count(grid, mask_ratio)
    return MaskPlan(
        patch_size=patch_size,
        grid=grid,
        kept_indices=perm[:n_keep].copy(),
        masked_indices=perm[n_keep:].copy(),
        seed=seed,
    )


def patchify(data: np.ndarray, patch_size: int) -> np.ndarray:
    """[H, W, C] -> [G^2, P*P*C] with row-major patch order (py*G + px)."""
    h, w, c = data.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise IndivisiblePatchSizeError(f"map {h}x{w} not divisible by patch size {patch_size}")
    gy, gx = h // patch_size, w // patch_size
    x = data.reshape(gy, patch_size, gx, patch_size, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(gy * gx, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of patchify for square maps; bit-exact round trip."""
    n_patches, flat = patches.shape
    grid = int(round(math.sqrt(n_patches)))
    if grid * grid != n_patches or flat != patch_size * patch_size * channels:
        raise ShapeMismatchError(f"cannot unpatchify {patches.shape} with P={patch_size}, C={channels}")
    x = patches.reshape(grid, grid, patch_size, patch_size, channels)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(grid * patch_size, grid * patch_size, channels)


# ---------------------------------------------------------------------------
# On-disk formats (little-endian)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ends inside {what} ({len(buf)}/{n} bytes)")
    return buf


def write_stmap(path, m: STMap) -> None:
    """magic 'STMP', u32 version, u32 H, u32 W, u32 C, u32 variant, f32 fs, f32 payload."""
    h, w, c = m.data.shape
    with open(path, "wb") as fh:
        fh.write(STMAP_MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, h, w, c, m.variant.value))
        fh.write(struct.pack("<f", m.fs))
        fh.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())


def read_stmap(path) -> STMap:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != STMAP_MAGIC:
            raise BadMagicError(f"expected {STMAP_MAGIC!r}, got {magic!r}")
        version, h, w, c, tag = struct.unpack("<IIIII", _read_exact(fh, 20, "header"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported STMP version {version}")
        (fs,) = struct.unpack("<f", _read_exact(fh, 4, "header"))
        payload = _read_exact(fh, h * w * c * 4, "payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return STMap(data=data.astype(np.float32), fs=float(fs), variant=Variant(tag))


def write_traces(path, ts: RoiTraceSet) -> None:
    """magic 'ROIT', u32 version, u32 n_rois, u32 T, f32 fs, u8 has_label, payload."""
    n, _, t_len = ts.traces.shape
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, n, t_len))
        fh.write(struct.pack("<f", ts.fs))
        fh.write(struct.pack("<B", 1 if ts.label is not None else 0))
        fh.write(np.ascontiguousarray(ts.traces, dtype="<f4").tobytes())
        if ts.label is not None:
            fh.write(struct.pack("<I", ts.label.samples.size))
            fh.write(np.ascontiguousarray(ts.label.samples, dtype="<f4").tobytes())
            fh.write(struct.pack("<ff", ts.label.hr_gt, ts.label.rf_gt))


def read_traces(path) -> RoiTraceSet:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != TRACE_MAGIC:
            raise BadMagicError(f"expected {TRACE_MAGIC!r}, got {magic!r}")
        version, n, t_len = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported ROIT version {version}")
        (fs,) = struct.unpack("<f", _read_exact(fh, 4, "header"))
        (has_label,) = struct.unpack("<B", _read_exact(fh, 1, "header"))
        payload = _read_exact(fh, n * 3 * t_len * 4, "payload")
        traces = np.frombuffer(payload, dtype="<f4").reshape(n, 3, t_len).astype(np.float32)
        label = None
        if has_label:
            (label_len,) = struct.unpack("<I", _read_exact(fh, 4, "label header"))
            samples = np.frombuffer(_read_exact(fh, label_len * 4, "label"), dtype="<f4")
            hr_gt, rf_gt = struct.unpack("<ff", _read_exact(fh, 8, "label tail"))
            label = BvpSignal(
                samples=samples.astype(np.float32), fs=float(fs), hr_gt=hr_gt, rf_gt=rf_gt
            )
    return RoiTraceSet(traces=traces, fs=float(fs), label=label)
