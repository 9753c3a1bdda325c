"""Training and evaluation protocols plus physiological read-outs.

Covers MAE pre-training, fine-tuning, linear probing, semi-supervised
splits, transfer/cross-dataset runs, the mask-ratio/variant ablation
grid, and HR / HRV / RF estimation with STD/MAE/RMSE/r reporting.
"""

import hashlib
import json
import math
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import find_peaks

from . import dsp, objectives, stmap
from .errors import (
    ConfigError,
    EmptySideError,
    LabelLengthMismatchError,
    LengthMismatchError,
    NanGradientError,
    ShapeMismatchError,
    TooFewBeatsError,
    TooShortInputError,
)
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.model import (
    DecoderConfig,
    EncoderConfig,
    LinearProbe,
    MaskedAutoencoder,
    RppgRegressor,
    desk_profile,
    paper_profile,
)
from .nn.optim import (
    OptimState,
    adamw_step,
    default_decay_flags,
    encoder_layer_ids,
    layerwise_lr_multipliers,
    lr_at,
)
from .objectives import FinetuneLossCfg, PretrainLossCfg
from .stmap import STMap, StmapClipSet, Variant, make_mask_plan, patchify
from .synthgen import RoiTraceSet, SynthConfig, gen_bvp, gen_roi_traces

PULSE_BAND = (0.6, 3.0)
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.4)
IBI_FS = 4.0  # Hz, IBI series resampling rate


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """One training stage. Stage constructors carry the published
    defaults; desk-scale tests override epochs/batch sizes."""

    stage: str = "pretrain"
    epochs: int = 400
    batch_size: int = 64
    base_lr: float = 0.001
    warmup_epochs: float = 40
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    layer_decay: float = 1.0
    mask_ratio: float = 0.8
    stmap_variant: str = "PC"
    lam: float = 0.0
    gamma: float = 1.0
    seed: int = 0
    numeric_mode: str = "f32"
    profile: str = "desk"
    ckpt_every: int = 0  # 0 = only final + rolling last

    @classmethod
    def pretrain_defaults(cls, **over) -> "TrainConfig":
        return replace(cls(stage="pretrain"), **over)

    @classmethod
    def finetune_defaults(cls, **over) -> "TrainConfig":
        base = cls(
            stage="finetune",
            epochs=20,
            batch_size=64,
            base_lr=0.001,
            warmup_epochs=5,
            betas=(0.9, 0.9999),
            weight_decay=0.05,
            layer_decay=0.75,
        )
        return replace(base, **over)

    @classmethod
    def probe_defaults(cls, **over) -> "TrainConfig":
        base = cls(
            stage="probe",
            epochs=50,
            batch_size=512,
            base_lr=0.01,
            warmup_epochs=5,
            betas=(0.9, 0.999),
            weight_decay=0.0,
        )
        return replace(base, **over)

    def validate(self) -> None:
        if self.stage not in ("pretrain", "finetune", "probe"):
            raise ConfigError(f"unknown stage '{self.stage}'")
        if self.numeric_mode not in ("f32", "f64"):
            raise ConfigError(f"numeric_mode must be f32|f64, got '{self.numeric_mode}'")
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"profile must be desk|paper, got '{self.profile}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class PhysioEstimate:
    hr_bpm: float
    lf_nu: float
    hf_nu: float
    lf_hf: float
    rf_hz: float
    degenerate: bool = False


@dataclass
class MetricReport:
    mean_ae: float
    rmse: float
    std: float
    pearson_r: float
    rows: list = field(default_factory=list)  # (clip_id, pred, gt, abs_err)

    def to_csv(self, path) -> None:
        lines = ["clip_id,pred_hr,gt_hr,abs_err"]
        for cid, pred, gt, err in self.rows:
            lines.append(f"{cid},{pred:.17g},{gt:.17g},{err:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self, config_echo: dict | None = None) -> dict:
        return {
            "mean_ae": self.mean_ae,
            "rmse": self.rmse,
            "std": self.std,
            "r": self.pearson_r,
            "n_clips": len(self.rows),
            "config": config_echo or {},
            "git_describe": git_describe(),
        }

    def to_json(self, path, config_echo: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.summary(config_echo), sort_keys=True, indent=2) + "\n")


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed derived from the given parts."""
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little") >> 1


# ---------------------------------------------------------------------------
# dataset plumbing


def variant_components(variant: Variant) -> list[Variant]:
    if not variant.is_combined:
        return [variant]
    for (a, b), combined in stmap.COMBINATIONS.items():
        if combined == variant:
            return [a, b]
    raise ConfigError(f"no components for {variant}")


def make_clipset(
    traces: RoiTraceSet,
    source_id: str,
    variant: Variant,
    clip_len: int,
    step: int,
    aug_channels: str = "eq1",
) -> StmapClipSet:
    """Traces -> square resized STMap clips with aligned BVP label slices."""
    parts = [
        stmap.build_base_stmap(traces, comp, aug_channels=aug_channels)
        for comp in variant_components(variant)
    ]
    large = parts[0] if len(parts) == 1 else stmap.build_combined_stmap(parts[0], parts[1])
    cropped = stmap.crop_windows(large, clip_len, step)
    clips, labels = [], []
    for k, clip in enumerate(cropped.clips):
        resized = stmap.resize_rows(clip.data, clip_len)
        clips.append(STMap(data=resized, fs=traces.fs, variant=variant))
        if traces.label is not None:
            labels.append(np.asarray(traces.label.samples[k * step : k * step + clip_len], dtype=np.float64))
    return StmapClipSet(
        clips=clips,
        source_id=source_id,
        labels=labels if traces.label is not None else None,
        hr_gt=traces.label.hr_gt if traces.label is not None else None,
        rf_gt=traces.label.rf_gt if traces.label is not None else None,
    )


@dataclass
class _FlatClip:
    clip_id: str
    patches: np.ndarray  # [G^2, P^2*C]
    map_data: np.ndarray  # [H, W, C]
    fs: float
    source_id: str
    hr_gt: float | None
    label: np.ndarray | None


def flatten_clips(sets: list[StmapClipSet], patch_size: int) -> list[_FlatClip]:
    flat = []
    shape = None
    for s in sets:
        for k, clip in enumerate(s.clips):
            if shape is None:
                shape = clip.data.shape
            elif clip.data.shape != shape:
                raise ShapeMismatchError(f"clip shapes differ: {clip.data.shape} vs {shape}")
            label = None
            if s.labels is not None:
                label = s.labels[k]
                if label.size != clip.data.shape[1]:
                    raise LabelLengthMismatchError(
                        f"{s.source_id}[{k}]: label {label.size} vs clip width {clip.data.shape[1]}"
                    )
            flat.append(
                _FlatClip(
                    clip_id=f"{s.source_id}/{k}",
                    patches=patchify(np.asarray(clip.data, dtype=np.float64), patch_size),
                    map_data=np.asarray(clip.data, dtype=np.float64),
                    fs=clip.fs,
                    source_id=s.source_id,
                    hr_gt=s.hr_gt,
                    label=label,
                )
            )
    if not flat:
        raise ConfigError("dataset is empty")
    return flat


def _profile_for(cfg: TrainConfig, side: int, channels: int) -> tuple[EncoderConfig, DecoderConfig]:
    if cfg.profile == "desk":
        return desk_profile(in_channels=channels, side=side, patch_size=8)
    return paper_profile(in_channels=channels, side=side, patch_size=16)


def semi_split(sets: list[StmapClipSet], fraction: float, seed: int):
    """Deterministic (unlabeled, labeled) partition.

    Subject-disjoint when more than one source id exists, otherwise
    clip-level. Sides are complements; an empty side is an error.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(stable_seed(seed, "semi"))
    subjects = sorted({s.source_id for s in sets})
    if len(subjects) > 1:
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        n_lab = int(round(fraction * len(order)))
        if n_lab == 0 or n_lab == len(order):
            raise EmptySideError(f"fraction {fraction} of {len(order)} subjects leaves a side empty")
        labeled_ids = set(order[:n_lab])
        labeled = [s for s in sets if s.source_id in labeled_ids]
        unlabeled = [s for s in sets if s.source_id not in labeled_ids]
        return unlabeled, labeled
    # single subject: split its clips
    s = sets[0]
    n = len(s.clips)
    order = rng.permutation(n)
    n_lab = int(round(fraction * n))
    if n_lab == 0 or n_lab == n:
        raise EmptySideError(f"fraction {fraction} of {n} clips leaves a side empty")
    lab_idx = set(order[:n_lab].tolist())

    def subset(take_labeled: bool) -> StmapClipSet:
        keep = [k for k in range(n) if (k in lab_idx) == take_labeled]
        return StmapClipSet(
            clips=[s.clips[k] for k in keep],
            source_id=s.source_id,
            labels=[s.labels[k] for k in keep] if s.labels is not None else None,
            hr_gt=s.hr_gt,
            rf_gt=s.rf_gt,
        )

    return [subset(False)], [subset(True)]


# ---------------------------------------------------------------------------
# training loops


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(stable_seed(seed, "order", epoch)).permutation(n)


def _write_loss_log(out_dir: Path, history: list[float]) -> None:
    lines = ["epoch,loss"] + [f"{i + 1},{v:.17g}" for i, v in enumerate(history)]
    (out_dir / "loss_log.csv").write_text("\n".join(lines) + "\n")


def _optim_blob(state: OptimState) -> dict[str, np.ndarray]:
    blob = {}
    for name, arr in state.m.items():
        blob[f"optim.m.{name}"] = arr.astype(np.float32)
    for name, arr in state.v.items():
        blob[f"optim.v.{name}"] = arr.astype(np.float32)
    return blob


def _restore_optim(state: OptimState, params: dict[str, np.ndarray]) -> None:
    for name, arr in params.items():
        if name.startswith("optim.m."):
            state.m[name[len("optim.m.") :]] = arr.astype(np.float64)
        elif name.startswith("optim.v."):
            state.v[name[len("optim.v.") :]] = arr.astype(np.float64)


def pretrain(
    sets: list[StmapClipSet],
    cfg: TrainConfig,
    out_dir=None,
    resume: bool = False,
) -> tuple[MaskedAutoencoder, list[float]]:
    """Masked-reconstruction pre-training. Returns (model, per-epoch loss).

    Every clip gets a fresh seeded mask plan each epoch; the data order
    reshuffles per epoch; both derive from cfg.seed only, so reruns are
    bit-reproducible.
    """
    cfg.validate()
    first = sets[0].clips[0]
    side, channels = first.data.shape[0], first.data.shape[2]
    enc_cfg, dec_cfg = _profile_for(cfg, side, channels)
    clips = flatten_clips(sets, enc_cfg.patch_size)
    model = MaskedAutoencoder(enc_cfg, dec_cfg, seed=cfg.seed, dtype=cfg.numeric_mode)
    state = OptimState(
        beta1=cfg.betas[0], beta2=cfg.betas[1], weight_decay=cfg.weight_decay, base_lr=cfg.base_lr
    )
    decay = default_decay_flags(model.params.table)
    loss_cfg = PretrainLossCfg(lam=cfg.lam)
    loss_cfg.validate()

    out_path = Path(out_dir) if out_dir is not None else None
    history: list[float] = []
    start_epoch = 0
    if resume and out_path is not None and (out_path / "last.rmae").exists():
        meta, blob = load_checkpoint(out_path / "last.rmae")
        model.params.load({k: v for k, v in blob.items() if not k.startswith("optim.")})
        _restore_optim(state, blob)
        state.step = int(meta.get("optim_step", 0))
        start_epoch = int(meta.get("epochs_done", 0))
        history = list(meta.get("history", []))

    n = len(clips)
    batch = min(cfg.batch_size, n)
    n_batches = math.ceil(n / batch)
    grid = enc_cfg.seq_side
    n_keep = stmap.kept_count(grid, cfg.mask_ratio)
    if n_keep < 1:
        raise ConfigError(f"mask ratio {cfg.mask_ratio} keeps no patches on a {grid}x{grid} grid")

    for epoch in range(start_epoch, cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, n)
        total = 0.0
        for b in range(n_batches):
            idxs = order[b * batch : (b + 1) * batch]
            plans = [
                make_mask_plan(side, enc_cfg.patch_size, cfg.mask_ratio, stable_seed(cfg.seed, "mask", epoch, int(i)))
                for i in idxs
            ]
            kept_idx = np.stack([p.kept_indices for p in plans])
            ids_restore = np.stack([p.ids_restore() for p in plans])
            kept_flags = np.stack([p.kept_flags() for p in plans])
            gt = np.stack([clips[i].patches for i in idxs])
            kept_patches = np.take_along_axis(gt, kept_idx[:, :, None], axis=1)

            model.params.zero_grads()
            encoded = model.encode_batch(kept_patches, kept_idx)
            pred = model.decode_batch(encoded, ids_restore)
            parts = []
            if loss_cfg.lam > 0.0:
                parts.append(loss_cfg.lam * objectives.pixel_loss_batch(pred, gt, ~kept_flags))
            if loss_cfg.lam < 1.0:
                parts.append(
                    (1.0 - loss_cfg.lam)
                    * objectives.rppg_recon_loss_batch(pred, gt, kept_flags, enc_cfg.patch_size, channels)
                )
            loss = parts[0] if len(parts) == 1 else parts[0] + parts[1]
            try:
                loss.backward()
                lr = lr_at(epoch + b / n_batches, cfg.base_lr, cfg.batch_size, cfg.warmup_epochs, cfg.epochs)
                adamw_step(model.params.table, state, lr, decay_flags=decay)
            except NanGradientError as err:
                raise NanGradientError(err.param_name, f"epoch {epoch} batch {b}: {err}") from None
            total += loss.item() * len(idxs)
        history.append(total / n)

        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            meta = {
                "stage": "pretrain",
                "profile": cfg.profile,
                "side": side,
                "channels": channels,
                "epochs_done": epoch + 1,
                "optim_step": state.step,
                "history": history,
            }
            blob = model.params.values()
            blob.update(_optim_blob(state))
            save_checkpoint(out_path / "last.rmae", meta, blob)
            if cfg.ckpt_every and (epoch + 1) % cfg.ckpt_every == 0:
                save_checkpoint(out_path / f"epoch{epoch + 1:04d}.rmae", meta, model.params.values())

    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        _write_loss_log(out_path, history)
        save_checkpoint(
            out_path / "checkpoint.rmae",
            {"stage": "pretrain", "profile": cfg.profile, "side": side, "channels": channels},
            model.params.values(),
        )
    return model, history


def _load_encoder_init(model, init) -> None:
    """init: None | 'random' | checkpoint path | params dict."""
    if init is None or init == "random":
        return
    if isinstance(init, (str, Path)):
        _, params = load_checkpoint(init)
    else:
        params = init
    loaded = model.params.load(params, partial=True)
    if not any(name.startswith("encoder.") for name in loaded):
        raise ShapeMismatchError("checkpoint contains no matching encoder weights")


def finetune(
    sets: list[StmapClipSet],
    cfg: TrainConfig,
    init=None,
    out_dir=None,
) -> tuple[RppgRegressor, list[float]]:
    """Supervised rPPG regression from full (unmasked) patches.

    init may be a pre-training checkpoint (encoder weights are mapped
    in; the head starts fresh), 'random', or a params dict.
    """
    cfg.validate()
    first = sets[0].clips[0]
    side, channels = first.data.shape[0], first.data.shape[2]
    enc_cfg, _ = _profile_for(cfg, side, channels)
    clips = flatten_clips(sets, enc_cfg.patch_size)
    if any(c.label is None for c in clips):
        raise ConfigError("finetune needs BVP labels on every clip")
    model = RppgRegressor(enc_cfg, out_len=side, seed=cfg.seed, dtype=cfg.numeric_mode)
    _load_encoder_init(model, init)

    layer_ids = encoder_layer_ids(model.params.table.keys(), enc_cfg.depth)
    mults = layerwise_lr_multipliers(enc_cfg.depth + 1, cfg.layer_decay)
    lr_mult = {name: float(mults[layer_ids[name]]) for name in model.params.table}
    state = OptimState(
        beta1=cfg.betas[0], beta2=cfg.betas[1], weight_decay=cfg.weight_decay, base_lr=cfg.base_lr
    )
    decay = default_decay_flags(model.params.table)
    loss_cfg = FinetuneLossCfg(gamma=cfg.gamma)
    loss_cfg.validate()
    fs = clips[0].fs

    n = len(clips)
    batch = min(cfg.batch_size, n)
    n_batches = math.ceil(n / batch)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, n)
        total = 0.0
        for b in range(n_batches):
            idxs = order[b * batch : (b + 1) * batch]
            patches = np.stack([clips[i].patches for i in idxs])
            labels = np.stack([clips[i].label for i in idxs])
            hrs = np.array([clips[i].hr_gt if clips[i].hr_gt is not None else 0.0 for i in idxs])
            model.params.zero_grads()
            pred = model.forward(patches)
            loss = objectives.finetune_loss(pred, labels, hrs, fs, loss_cfg)
            try:
                loss.backward()
                lr = lr_at(epoch + b / n_batches, cfg.base_lr, cfg.batch_size, cfg.warmup_epochs, cfg.epochs)
                adamw_step(model.params.table, state, lr, lr_multipliers=lr_mult, decay_flags=decay)
            except NanGradientError as err:
                raise NanGradientError(err.param_name, f"epoch {epoch} batch {b}: {err}") from None
            total += loss.item() * len(idxs)
        history.append(total / n)

    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        _write_loss_log(out_path, history)
        save_checkpoint(
            out_path / "checkpoint.rmae",
            {"stage": "finetune", "profile": cfg.profile, "side": side, "channels": channels},
            model.params.values(),
        )
    return model, history


def linear_probe(
    train_sets: list[StmapClipSet],
    cfg: TrainConfig,
    encoder_init=None,
    test_sets: list[StmapClipSet] | None = None,
    loss_cfg: FinetuneLossCfg | None = None,
) -> tuple[LinearProbe, MetricReport]:
    """Train a linear HR-bin classifier on the frozen encoder's class token.

    Only the probe head receives optimizer updates; an assertion checks
    the encoder weights are bit-identical before and after.
    """
    cfg.validate()
    loss_cfg = loss_cfg or FinetuneLossCfg()
    first = train_sets[0].clips[0]
    side, channels = first.data.shape[0], first.data.shape[2]
    enc_cfg, _ = _profile_for(cfg, side, channels)
    clips = flatten_clips(train_sets, enc_cfg.patch_size)
    if any(c.hr_gt is None for c in clips):
        raise ConfigError("linear probe needs HR labels")
    model = LinearProbe(enc_cfg, n_bins=loss_cfg.n_bins, seed=cfg.seed, dtype=cfg.numeric_mode)
    _load_encoder_init(model, encoder_init)

    frozen_before = {
        k: v.data.copy() for k, v in model.params.table.items() if not k.startswith("probe.")
    }
    head = model.head_params()
    state = OptimState(
        beta1=cfg.betas[0], beta2=cfg.betas[1], weight_decay=cfg.weight_decay, base_lr=cfg.base_lr
    )
    decay = default_decay_flags(head)
    bins = np.array([loss_cfg.bin_index(c.hr_gt) for c in clips])

    from .nn import tensor as T

    n = len(clips)
    batch = min(cfg.batch_size, n)
    n_batches = math.ceil(n / batch)
    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, n)
        for b in range(n_batches):
            idxs = order[b * batch : (b + 1) * batch]
            patches = np.stack([clips[i].patches for i in idxs])
            model.params.zero_grads()
            logits = model.forward(patches)
            shift = T.constant(logits.data.max(axis=-1, keepdims=True))
            log_z = (((logits - shift).exp()).sum(axis=-1, keepdims=True)).log() + shift
            picked = T.gather_rows(logits.reshape(len(idxs), loss_cfg.n_bins, 1), bins[idxs][:, None])
            loss = (log_z.reshape(len(idxs)) - picked.reshape(len(idxs))).mean()
            loss.backward()
            lr = lr_at(epoch + b / n_batches, cfg.base_lr, cfg.batch_size, cfg.warmup_epochs, cfg.epochs)
            adamw_step(head, state, lr, decay_flags=decay)

    frozen_after = {k: v.data for k, v in model.params.table.items() if not k.startswith("probe.")}
    for k, before in frozen_before.items():
        assert np.array_equal(before, frozen_after[k]), f"frozen encoder weight '{k}' changed"

    eval_clips = clips if test_sets is None else flatten_clips(test_sets, enc_cfg.patch_size)
    preds, gts, ids = [], [], []
    for c in eval_clips:
        logits = model.forward(c.patches[None]).data[0]
        preds.append(loss_cfg.bin_center(int(np.argmax(logits))))
        gts.append(c.hr_gt)
        ids.append(c.clip_id)
    return model, compute_metrics(np.array(preds), np.array(gts), ids)


# ---------------------------------------------------------------------------
# physiological read-outs


def _parabolic_refine(values: np.ndarray, k: int) -> float:
    """Sub-bin offset of a peak at index k from its two neighbors."""
    if k <= 0 or k >= values.size - 1:
        return 0.0
    left, center, right = values[k - 1], values[k], values[k + 1]
    denom = left - 2.0 * center + right
    if denom == 0:
        return 0.0
    delta = 0.5 * (left - right) / denom
    return float(np.clip(delta, -0.5, 0.5))


def estimate_hr(signal: np.ndarray, fs: float) -> float:
    """Spectral-peak HR: band-pass, periodogram, in-band argmax with
    3-point parabolic interpolation on log power. Returns bpm."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size < 5 * fs:
        raise TooShortInputError(f"estimate_hr needs >= 5 s, got {signal.size / fs:.2f} s")
    y = dsp.butterworth_bandpass(signal, fs, *PULSE_BAND)
    spec = dsp.psd(y, fs)
    band = (spec.freqs >= PULSE_BAND[0]) & (spec.freqs <= PULSE_BAND[1])
    band_idx = np.flatnonzero(band)
    k = band_idx[int(np.argmax(spec.power[band_idx]))]
    logp = np.log(spec.power + 1e-300)
    delta = _parabolic_refine(logp, k)
    f_peak = spec.freqs[k] + delta * (spec.freqs[1] - spec.freqs[0])
    return 60.0 * float(f_peak)


def estimate_hrv_rf(signal: np.ndarray, fs: float) -> PhysioEstimate:
    """HRV band powers and respiration frequency from the beat intervals.

    Systolic peaks (min distance 60/180 s, prominence 0.3 std) are
    refined to sub-sample times, the inter-beat series is spline-resampled
    to 4 Hz, and LF [0.04, 0.15] / HF [0.15, 0.4] band powers are read
    from its periodogram. RF is the HF-band spectral peak (respiratory
    sinus arrhythmia).
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size < 30 * fs:
        raise TooShortInputError(f"estimate_hrv_rf needs >= 30 s, got {signal.size / fs:.2f} s")
    y = dsp.butterworth_bandpass(signal, fs, *PULSE_BAND)
    min_dist = max(1, int(round(fs * 60.0 / 180.0)))
    peaks, _ = find_peaks(y, distance=min_dist, prominence=0.3 * y.std())
    if peaks.size < 10:
        raise TooFewBeatsError(f"only {peaks.size} beats detected")
    t_peaks = np.array([(k + _parabolic_refine(y, k)) / fs for k in peaks])
    ibi = np.diff(t_peaks)
    t_ibi = t_peaks[1:]

    spline = CubicSpline(t_ibi, ibi, bc_type="natural")
    n_out = int(np.floor((t_ibi[-1] - t_ibi[0]) * IBI_FS)) + 1
    grid = t_ibi[0] + np.arange(n_out) / IBI_FS
    ibi_series = spline(grid)
    spec = dsp.psd(ibi_series, IBI_FS)

    lf_sel = (spec.freqs >= LF_BAND[0]) & (spec.freqs < LF_BAND[1])
    hf_sel = (spec.freqs >= HF_BAND[0]) & (spec.freqs <= HF_BAND[1])
    lf = float(spec.power[lf_sel].sum())
    hf = float(spec.power[hf_sel].sum())
    # degenerate when band power is negligible relative to the interval
    # scale (sub-microsecond IBI wobble = metrologically nothing)
    degenerate = (lf + hf) < 1e-9 * float(ibi.mean()) ** 2
    if degenerate:
        lf_nu, hf_nu, lf_hf = 0.5, 0.5, 0.0
    else:
        lf_nu = lf / (lf + hf)
        hf_nu = hf / (lf + hf)
        lf_hf = lf / hf if hf > 0 else 0.0
    hf_idx = np.flatnonzero(hf_sel)
    rf_hz = float(spec.freqs[hf_idx[int(np.argmax(spec.power[hf_idx]))]]) if hf_idx.size else 0.0
    hr_bpm = 60.0 / float(ibi.mean())
    return PhysioEstimate(
        hr_bpm=hr_bpm, lf_nu=lf_nu, hf_nu=hf_nu, lf_hf=lf_hf, rf_hz=rf_hz, degenerate=degenerate
    )


def compute_metrics(pred: np.ndarray, gt: np.ndarray, clip_ids=None) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise LengthMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.size < 2:
        raise LengthMismatchError("need at least 2 pairs")
    err = pred - gt
    ids = clip_ids if clip_ids is not None else [str(i) for i in range(pred.size)]
    rows = [(cid, float(p), float(g), float(abs(e))) for cid, p, g, e in zip(ids, pred, gt, err)]
    return MetricReport(
        mean_ae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        std=float(np.std(err)),
        pearson_r=dsp.pearson(pred, gt),
        rows=rows,
    )


def evaluate_regressor(
    model: RppgRegressor, sets: list[StmapClipSet], video_mean: bool = False
) -> MetricReport:
    """Per-clip spectral HR of the predicted signals vs ground truth."""
    clips = flatten_clips(sets, model.enc_cfg.patch_size)
    ids, preds, gts = [], [], []
    for c in clips:
        sig = model.forward(c.patches[None]).data[0]
        preds.append(estimate_hr(sig, c.fs))
        gts.append(c.hr_gt)
        ids.append(c.clip_id)
    preds, gts = np.array(preds), np.array(gts, dtype=np.float64)
    if video_mean:
        by_src: dict[str, list[int]] = {}
        for i, cid in enumerate(ids):
            by_src.setdefault(cid.rsplit("/", 1)[0], []).append(i)
        ids2, p2, g2 = [], [], []
        for src in sorted(by_src):
            sel = by_src[src]
            ids2.append(src)
            p2.append(preds[sel].mean())
            g2.append(gts[sel].mean())
        return compute_metrics(np.array(p2), np.array(g2), ids2)
    return compute_metrics(preds, gts, ids)


# ---------------------------------------------------------------------------
# protocols


@dataclass
class ProtocolBundle:
    train: list  # list[StmapClipSet]
    test: list | None = None
    pretrain_cfg: TrainConfig | None = None
    finetune_cfg: TrainConfig | None = None
    probe_cfg: TrainConfig | None = None
    labeled_fraction: float = 0.1
    folds: int = 5
    ablate_axis: str = "mask_ratio"
    ablate_values: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    traces: list | None = None  # [(source_id, RoiTraceSet)] for variant sweeps
    clip_len: int = 64
    clip_step: int = 24
    aug_channels: str = "eq1"
    out_dir: Path | None = None
    video_mean: bool = False


def assign_folds(sets: list[StmapClipSet], folds: int) -> dict[str, int]:
    """Subject -> fold by hashing the subject id: subjects are ordered by
    their hash and dealt round-robin, so folds are balanced, exhaustive
    and subject-disjoint."""
    subjects = sorted({s.source_id for s in sets})
    ranked = sorted(subjects, key=lambda s: (hashlib.blake2b(s.encode(), digest_size=8).hexdigest(), s))
    return {subj: i % folds for i, subj in enumerate(ranked)}


def _params_fingerprint(model) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(model.params.table):
        h.update(name.encode())
        h.update(model.params.table[name].data.tobytes())
    return h.hexdigest()


def run_protocol(protocol: str, bundle: ProtocolBundle) -> dict[str, MetricReport]:
    """Dispatch one evaluation protocol; returns named MetricReports.

    intra    5-fold subject-disjoint pretrain+finetune+eval
    transfer pretrain on A, finetune+test on B
    cross    pretrain+finetune on A, test on B untouched
    semi     split train by labeled_fraction, pretrain on the unlabeled side
    probe    pretrain, then linear probe
    ablate   grid sweep over mask_ratio | variant | lambda | epochs
    """
    runners = {
        "intra": _protocol_intra,
        "transfer": _protocol_transfer,
        "cross": _protocol_cross,
        "semi": _protocol_semi,
        "probe": _protocol_probe,
        "ablate": _protocol_ablate,
    }
    if protocol not in runners:
        raise ConfigError(f"unknown protocol '{protocol}'; legal: {', '.join(sorted(runners))}")
    reports = runners[protocol](bundle)
    if bundle.out_dir is not None:
        out = Path(bundle.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in reports.items():
            rep.to_csv(out / f"{name}.csv")
            rep.to_json(out / f"{name}.json")
    return reports


def _pool(reports: list[MetricReport]) -> MetricReport:
    rows = [r for rep in reports for r in rep.rows]
    pred = np.array([r[1] for r in rows])
    gt = np.array([r[2] for r in rows])
    return compute_metrics(pred, gt, [r[0] for r in rows])


def _protocol_intra(b: ProtocolBundle) -> dict[str, MetricReport]:
    fold_of = assign_folds(b.train, b.folds)
    reports = {}
    fold_reports = []
    for f in range(b.folds):
        test = [s for s in b.train if fold_of[s.source_id] == f]
        train = [s for s in b.train if fold_of[s.source_id] != f]
        if not test or not train:
            continue
        mae, _ = pretrain(train, b.pretrain_cfg)
        ckpt = mae.params.values()
        model, _ = finetune(train, b.finetune_cfg, init=ckpt)
        rep = evaluate_regressor(model, test, b.video_mean)
        reports[f"fold{f}"] = rep
        fold_reports.append(rep)
    reports["pooled"] = _pool(fold_reports)
    return reports


def _protocol_transfer(b: ProtocolBundle) -> dict[str, MetricReport]:
    if not b.test:
        raise ConfigError("transfer protocol needs a second dataset")
    mae, _ = pretrain(b.train, b.pretrain_cfg)
    fold_of = assign_folds(b.test, b.folds)
    test = [s for s in b.test if fold_of[s.source_id] == 0]
    ft_train = [s for s in b.test if fold_of[s.source_id] != 0]
    if not test or not ft_train:
        raise ConfigError("target dataset too small to split for transfer")
    model, _ = finetune(ft_train, b.finetune_cfg, init=mae.params.values())
    return {"transfer": evaluate_regressor(model, test, b.video_mean)}


def _protocol_cross(b: ProtocolBundle) -> dict[str, MetricReport]:
    if not b.test:
        raise ConfigError("cross protocol needs a second dataset")
    mae, _ = pretrain(b.train, b.pretrain_cfg)
    model, _ = finetune(b.train, b.finetune_cfg, init=mae.params.values())
    before = _params_fingerprint(model)
    rep = evaluate_regressor(model, b.test, b.video_mean)
    assert _params_fingerprint(model) == before, "cross-dataset eval must not update weights"
    return {"cross": rep}


def _protocol_semi(b: ProtocolBundle) -> dict[str, MetricReport]:
    if not b.test:
        raise ConfigError("semi protocol needs a held-out test set")
    unlabeled, labeled = semi_split(b.train, b.labeled_fraction, b.pretrain_cfg.seed)
    mae, _ = pretrain(unlabeled, b.pretrain_cfg)
    with_pt, _ = finetune(labeled, b.finetune_cfg, init=mae.params.values())
    without_pt, _ = finetune(labeled, b.finetune_cfg, init=None)
    return {
        "semi_pretrained": evaluate_regressor(with_pt, b.test, b.video_mean),
        "semi_scratch": evaluate_regressor(without_pt, b.test, b.video_mean),
    }


def _protocol_probe(b: ProtocolBundle) -> dict[str, MetricReport]:
    mae, _ = pretrain(b.train, b.pretrain_cfg)
    _, rep = linear_probe(
        b.train, b.probe_cfg, encoder_init=mae.params.values(), test_sets=b.test or b.train
    )
    return {"probe": rep}


def ablate_point(b: ProtocolBundle, value) -> MetricReport:
    """One grid point of the ablation sweep."""
    pre = b.pretrain_cfg
    fin = b.finetune_cfg
    train, test = b.train, b.test
    if b.ablate_axis == "mask_ratio":
        pre = replace(pre, mask_ratio=float(value))
    elif b.ablate_axis == "lambda":
        pre = replace(pre, lam=float(value))
    elif b.ablate_axis == "epochs":
        pre = replace(pre, epochs=int(value))
    elif b.ablate_axis == "variant":
        if b.traces is None:
            raise ConfigError("variant sweep needs raw traces in the bundle")
        variant = Variant.parse(str(value))
        sets = [
            make_clipset(tr, sid, variant, b.clip_len, b.clip_step, b.aug_channels)
            for sid, tr in b.traces
        ]
        fold_of = assign_folds(sets, b.folds)
        test = [s for s in sets if fold_of[s.source_id] == 0]
        train = [s for s in sets if fold_of[s.source_id] != 0]
    else:
        raise ConfigError(f"unknown ablation axis '{b.ablate_axis}'")
    if not test:
        raise ConfigError("ablate needs a test set")
    mae, _ = pretrain(train, pre)
    model, _ = finetune(train, fin, init=mae.params.values())
    return evaluate_regressor(model, test, b.video_mean)


def _protocol_ablate(b: ProtocolBundle) -> dict[str, MetricReport]:
    reports = {}
    for value in b.ablate_values:
        reports[f"{b.ablate_axis}={value}"] = ablate_point(b, value)
    if b.out_dir is not None:
        out = Path(b.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"{b.ablate_axis},mean_ae,rmse,std,r"]
        for value in b.ablate_values:
            rep = reports[f"{b.ablate_axis}={value}"]
            lines.append(f"{value},{rep.mean_ae:.17g},{rep.rmse:.17g},{rep.std:.17g},{rep.pearson_r:.17g}")
        (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    return reports


# ---------------------------------------------------------------------------
# synthetic benchmark


def make_synthetic_benchmark(
    n_subjects: int,
    seed: int,
    clips_per_subject_cfg: SynthConfig | None = None,
    hr_range: tuple = (50.0, 110.0),
    rf_range: tuple = (0.18, 0.35),
    variant: Variant = Variant.PC,
    clip_len: int = 64,
    clip_step: int = 24,
    aug_channels: str = "eq1",
) -> list[StmapClipSet]:
    """Deterministic multi-subject benchmark: one trace per subject with
    a random HR/RF, turned into labeled square clips."""
    base = clips_per_subject_cfg or SynthConfig(
        duration_s=30.0, fs=10.0, n_rois=25, motion_noise_std=0.5, illum_drift_amp=2.0, white_noise_std=0.3
    )
    rng = np.random.default_rng(stable_seed(seed, "benchmark"))
    sets = []
    for s in range(n_subjects):
        hr = float(rng.uniform(*hr_range))
        rf = float(rng.uniform(*rf_range))
        cfg = replace(base, hr_bpm=hr, rf_hz=rf, seed=stable_seed(seed, "subject", s))
        trace = gen_roi_traces(gen_bvp(cfg), cfg)
        sets.append(make_clipset(trace, f"subj{s:03d}", variant, clip_len, clip_step, aug_channels))
    return sets
