"""Loss functions for pre-training (masked reconstruction) and
fine-tuning (signal regression), differentiable through rppg_lab.nn.

Reconstruction losses score masked content only: the pixel loss averages
squared error over masked patches, and the row-correlation loss
reassembles the full map with ground-truth content substituted at kept
positions before computing per-row Pearson terms, so both are pure
functions of the masked predictions.

The frequency cross-entropy turns the prediction's spectrum into a
probability vector over 1-bpm bins via an explicit in-band DFT-matrix
product (gradients flow through the matmul). Spectral resolution is set
by the clip length: mass within ~60/clip_seconds bpm of the true rate
leaks into neighboring bins.
"""

from dataclasses import dataclass

import numpy as np

from .dsp import EPS_VAR, next_pow2
from .errors import (
    ConfigError,
    EmptyMaskError,
    HrOutOfRangeError,
    LengthMismatchError,
    ShapeMismatchError,
)
from .nn import tensor as T
from .nn.tensor import Tensor
from .stmap import MaskPlan, STMap, patchify

# added under the squared-sum product before sqrt so constant rows give
# r = 0 instead of 0/0, including in float32
DEN_GUARD = 1e-12
PROB_FLOOR = 1e-12


@dataclass
class PretrainLossCfg:
    """Mixing weight for the overall pre-training loss:
    lam * pixel + (1 - lam) * row-correlation."""

    lam: float = 0.0

    def validate(self) -> None:
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass
class FinetuneLossCfg:
    """gamma mixes negative-Pearson vs frequency cross-entropy; the HR
    grid is 1-bpm bins over [36, 180] (145 bins)."""

    gamma: float = 1.0
    hr_lo_bpm: float = 36.0
    hr_hi_bpm: float = 180.0
    hr_step_bpm: float = 1.0

    def validate(self) -> None:
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.hr_lo_bpm >= self.hr_hi_bpm:
            raise ConfigError("hr_lo must be < hr_hi")

    @property
    def n_bins(self) -> int:
        return int(round((self.hr_hi_bpm - self.hr_lo_bpm) / self.hr_step_bpm)) + 1

    def bin_index(self, hr_bpm: float) -> int:
        if not (self.hr_lo_bpm <= hr_bpm <= self.hr_hi_bpm):
            raise HrOutOfRangeError(f"gt HR {hr_bpm} outside [{self.hr_lo_bpm}, {self.hr_hi_bpm}] bpm")
        return int(round((hr_bpm - self.hr_lo_bpm) / self.hr_step_bpm))

    def bin_center(self, index: int) -> float:
        return self.hr_lo_bpm + index * self.hr_step_bpm


@dataclass
class ReconTarget:
    """Ground truth for one clip's reconstruction."""

    gt_patches: np.ndarray  # [G^2, P^2*C]
    plan: MaskPlan
    gt_map: np.ndarray  # [H, W, C]
    channels: int


def make_recon_target(stmap: STMap, plan: MaskPlan) -> ReconTarget:
    data = np.asarray(stmap.data, dtype=np.float64)
    return ReconTarget(
        gt_patches=patchify(data, plan.patch_size),
        plan=plan,
        gt_map=data,
        channels=data.shape[2],
    )


def _as_tensor(pred) -> Tensor:
    return pred if isinstance(pred, Tensor) else Tensor(pred)


def _batched(pred: Tensor, want_ndim: int) -> Tensor:
    if pred.ndim == want_ndim - 1:
        return pred.reshape((1,) + pred.shape)
    if pred.ndim != want_ndim:
        raise ShapeMismatchError(f"expected {want_ndim - 1}- or {want_ndim}-d input, got {pred.ndim}-d")
    return pred


# ---------------------------------------------------------------------------
# reconstruction losses


def pixel_loss(pred_patches, target: ReconTarget) -> Tensor:
    """Mean squared error over masked patches only."""
    pred = _batched(_as_tensor(pred_patches), 3)
    masked = ~target.plan.kept_flags()
    return pixel_loss_batch(pred, target.gt_patches[None], masked[None])


def pixel_loss_batch(pred: Tensor, gt_patches: np.ndarray, masked_flags: np.ndarray) -> Tensor:
    n_masked = int(masked_flags.sum())
    if n_masked == 0:
        raise EmptyMaskError("mask plan keeps every patch; nothing to score")
    mask = masked_flags.astype(pred.dtype)[..., None]
    diff = (pred - T.constant(gt_patches, pred.dtype)) * T.constant(mask)
    count = n_masked * gt_patches.shape[-1]
    return (diff * diff).sum() / float(count)


def rppg_recon_loss(pred_patches, target: ReconTarget) -> Tensor:
    """Per-row negative-Pearson average over the reassembled map.

    Ground truth is substituted at kept positions, so only masked
    predictions matter. Degenerate (constant) rows contribute 1."""
    pred = _batched(_as_tensor(pred_patches), 3)
    kept = target.plan.kept_flags()
    return rppg_recon_loss_batch(
        pred, target.gt_patches[None], kept[None], target.plan.patch_size, target.channels
    )


def rppg_recon_loss_batch(
    pred: Tensor, gt_patches: np.ndarray, kept_flags: np.ndarray, patch_size: int, channels: int
) -> Tensor:
    batch, n_patches, patch_dim = pred.shape
    grid = int(round(np.sqrt(n_patches)))
    if grid * grid != n_patches or patch_dim != patch_size * patch_size * channels:
        raise ShapeMismatchError(f"bad patch matrix {pred.shape} for P={patch_size}, C={channels}")
    side = grid * patch_size

    keep = kept_flags.astype(pred.dtype)[..., None]
    merged = pred * T.constant(1.0 - keep) + T.constant(gt_patches.astype(pred.dtype) * keep)

    # unpatchify: [B, G^2, P^2*C] -> [B, H, W, C]
    maps = merged.reshape(batch, grid, grid, patch_size, patch_size, channels)
    maps = maps.transpose((0, 1, 3, 2, 4, 5)).reshape(batch, side, side, channels)

    gt_maps = np.stack([_unpatchify_np(gt_patches[b], patch_size, channels) for b in range(batch)])
    yc = gt_maps - gt_maps.mean(axis=2, keepdims=True)
    ss_g = np.sum(yc * yc, axis=2)  # [B, H, C]

    mu = maps.mean(axis=2, keepdims=True)
    xc = maps - mu
    num = (xc * T.constant(yc.astype(pred.dtype))).sum(axis=2)
    ss_p = (xc * xc).sum(axis=2)
    den = (ss_p * T.constant(ss_g.astype(pred.dtype)) + DEN_GUARD).sqrt()
    r = num / den

    w = side  # samples per row
    valid = ((ss_p.data / (w - 1) >= EPS_VAR) & (ss_g / (w - 1) >= EPS_VAR)).astype(pred.dtype)
    return (1.0 - r * T.constant(valid)).mean()


def _unpatchify_np(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    grid = int(round(np.sqrt(patches.shape[0])))
    x = patches.reshape(grid, grid, patch_size, patch_size, channels)
    return x.transpose(0, 2, 1, 3, 4).reshape(grid * patch_size, grid * patch_size, channels)


def pretrain_loss(pred_patches, target: ReconTarget, cfg: PretrainLossCfg) -> Tensor:
    """lam * pixel + (1 - lam) * row-correlation."""
    cfg.validate()
    if cfg.lam == 1.0:
        return pixel_loss(pred_patches, target)
    if cfg.lam == 0.0:
        return rppg_recon_loss(pred_patches, target)
    return cfg.lam * pixel_loss(pred_patches, target) + (1.0 - cfg.lam) * rppg_recon_loss(
        pred_patches, target
    )


# ---------------------------------------------------------------------------
# fine-tuning losses


def negative_pearson_loss(pred_signal, gt_signal) -> Tensor:
    """1 - Pearson(pred, gt), in [0, 2]; degenerate variance gives r = 0."""
    pred = _batched(_as_tensor(pred_signal), 2)
    gt = np.asarray(gt_signal, dtype=np.float64)
    if gt.ndim == 1:
        gt = gt[None]
    if gt.shape != pred.shape:
        raise LengthMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    n = gt.shape[-1]
    if n < 2:
        raise LengthMismatchError("need at least 2 samples")

    yc = gt - gt.mean(axis=-1, keepdims=True)
    ss_g = np.sum(yc * yc, axis=-1)
    xc = pred - pred.mean(axis=-1, keepdims=True)
    num = (xc * T.constant(yc.astype(pred.dtype))).sum(axis=-1)
    ss_p = (xc * xc).sum(axis=-1)
    den = (ss_p * T.constant(ss_g.astype(pred.dtype)) + DEN_GUARD).sqrt()
    valid = ((ss_p.data / (n - 1) >= EPS_VAR) & (ss_g / (n - 1) >= EPS_VAR)).astype(pred.dtype)
    r = num / den
    return (1.0 - r * T.constant(valid)).mean()


_DFT_CACHE: dict = {}


def _dft_tables(n_samples: int, fs: float, cfg: FinetuneLossCfg):
    """In-band DFT matrices and the DFT-bin -> bpm-bin aggregation matrix.

    n_fft is the next power of two large enough that every 1-bpm bin
    contains at least one DFT bin center.
    """
    key = (n_samples, float(fs), cfg.hr_lo_bpm, cfg.hr_hi_bpm, cfg.hr_step_bpm)
    if key in _DFT_CACHE:
        return _DFT_CACHE[key]
    n_fft = next_pow2(max(n_samples, int(np.ceil(60.0 * fs / cfg.hr_step_bpm))))
    k = np.arange(n_fft // 2 + 1)
    bpm = 60.0 * k * fs / n_fft
    bins = np.round((bpm - cfg.hr_lo_bpm) / cfg.hr_step_bpm).astype(int)
    in_band = (bins >= 0) & (bins < cfg.n_bins)
    k = k[in_band]
    bins = bins[in_band]
    t = np.arange(n_samples)
    args = 2.0 * np.pi * np.outer(t, k) / n_fft
    cos_m = np.cos(args)
    sin_m = np.sin(args)
    agg = np.zeros((k.size, cfg.n_bins))
    agg[np.arange(k.size), bins] = 1.0
    _DFT_CACHE[key] = (cos_m, sin_m, agg)
    return _DFT_CACHE[key]


def frequency_ce_loss(pred_signal, fs: float, gt_hr_bpm, cfg: FinetuneLossCfg) -> Tensor:
    """Cross-entropy of the spectral distribution against the gt HR bin.

    The zero-meaned prediction is projected on explicit in-band cos/sin
    DFT vectors; bin powers are aggregated into 1-bpm bins by rounding
    and L1-normalized into a probability vector (floor 1e-12). Returns
    -log p[bin(gt_hr)], averaged over the batch.
    """
    cfg.validate()
    pred = _batched(_as_tensor(pred_signal), 2)
    batch, n = pred.shape
    hrs = np.atleast_1d(np.asarray(gt_hr_bpm, dtype=np.float64))
    if hrs.size == 1 and batch > 1:
        hrs = np.full(batch, hrs[0])
    if hrs.size != batch:
        raise LengthMismatchError(f"{hrs.size} gt HRs for batch of {batch}")
    idx = np.array([cfg.bin_index(h) for h in hrs])

    cos_m, sin_m, agg = _dft_tables(n, fs, cfg)
    x = pred - pred.mean(axis=-1, keepdims=True)
    re = x @ T.constant(cos_m.astype(pred.dtype))
    im = x @ T.constant(sin_m.astype(pred.dtype))
    power = re * re + im * im
    mass = power @ T.constant(agg.astype(pred.dtype))  # [B, n_bins]
    total = mass.sum(axis=-1, keepdims=True)
    prob = (mass + PROB_FLOOR) / (total + cfg.n_bins * PROB_FLOOR)
    picked = T.gather_rows(prob.reshape(batch, cfg.n_bins, 1), idx[:, None])
    return -(picked.log()).mean()


def finetune_loss(pred_signal, gt_signal, gt_hr_bpm, fs: float, cfg: FinetuneLossCfg) -> Tensor:
    """gamma * negative-Pearson + (1 - gamma) * frequency cross-entropy."""
    cfg.validate()
    if cfg.gamma == 1.0:
        return negative_pearson_loss(pred_signal, gt_signal)
    if cfg.gamma == 0.0:
        return frequency_ce_loss(pred_signal, fs, gt_hr_bpm, cfg)
    return cfg.gamma * negative_pearson_loss(pred_signal, gt_signal) + (
        1.0 - cfg.gamma
    ) * frequency_ce_loss(pred_signal, fs, gt_hr_bpm, cfg)
