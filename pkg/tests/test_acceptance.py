"""Acceptance suite: every criterion at its stated tolerance, one
pass/fail line each (run with `pytest -s` to see them inline).

Criteria 6 and 7 share one pre-training run (7 fine-tunes from 6's
checkpoint); the module-scoped fixture below performs it once.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from _util import REL_FLOOR, rel_err
from rppg_lab import chroma, dsp, objectives, pipeline, stmap
from rppg_lab.errors import BadMagicError, TruncatedFileError
from rppg_lab.nn.model import DecoderConfig, EncoderConfig, MaskedAutoencoder, RppgRegressor
from rppg_lab.objectives import FinetuneLossCfg, PretrainLossCfg, make_recon_target
from rppg_lab.pipeline import TrainConfig
from rppg_lab.stmap import STMap, StmapClipSet, Variant, make_mask_plan, patchify, unpatchify
from rppg_lab.synthgen import SynthConfig, gen_bvp, gen_roi_traces


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


# Shared desk benchmark: 20 training subjects (200 PC clips), 8 test
# subjects, mild noise, HR 60-90 bpm at fs 10.
BENCH_NOISE = dict(motion_noise_std=0.05, illum_drift_amp=0.25, white_noise_std=0.05)
BENCH_BASE = SynthConfig(duration_s=30.0, fs=10.0, n_rois=25, **BENCH_NOISE)


def benchmark_sets(n_subjects, seed):
    return pipeline.make_synthetic_benchmark(
        n_subjects=n_subjects, seed=seed, clips_per_subject_cfg=BENCH_BASE, hr_range=(60, 90)
    )


@pytest.fixture(scope="module")
def pretrained_checkpoint():
    """Criterion 6's training run; also feeds criterion 7."""
    train = benchmark_sets(20, seed=11)
    cfg = TrainConfig.pretrain_defaults(
        epochs=50, batch_size=4, base_lr=0.04, warmup_epochs=10, seed=3, mask_ratio=0.8, lam=0.0
    )
    start = time.time()
    model, history = pipeline.pretrain(train, cfg)
    elapsed = time.time() - start
    return train, model, history, elapsed, cfg


class TestCriterion1GradientOracle:
    def test_gradient_oracle(self):
        start = time.time()
        worst = 0.0
        for seed in range(10):
            worst = max(worst, self._check_seed(seed))
        elapsed = time.time() - start
        ok = worst < 1e-5 and elapsed < 120
        report(
            "criterion 1 (gradient oracle)",
            ok,
            f"max rel err {worst:.2e} (< 1e-5, floor {REL_FLOOR}), {elapsed:.0f}s (< 120s)",
        )

    @staticmethod
    def _check_seed(seed: int) -> float:
        rng = np.random.default_rng(1000 + seed)
        grid, patch, channels, dim = 4, 4, 3, 16
        side = grid * patch
        enc = EncoderConfig(depth=2, dim=dim, heads=2, patch_size=patch,
                            in_channels=channels, seq_side=grid)
        dec = DecoderConfig(depth=2, dim=dim, heads=2, patch_size=patch,
                            in_channels=channels, seq_side=grid)
        mae = MaskedAutoencoder(enc, dec, seed=seed, dtype="f64")
        reg = RppgRegressor(enc, out_len=side, seed=seed, dtype="f64")

        map_data = rng.random((side, side, channels))
        plan = make_mask_plan(side, patch, 0.75, seed=seed)
        patches = patchify(map_data, patch)
        target = make_recon_target(STMap(data=map_data, fs=10.0, variant=Variant.ORIGINAL), plan)
        gt_sig = rng.standard_normal(side)
        ft_cfg = FinetuneLossCfg(gamma=0.5)

        recon_losses = {
            "pixel": lambda pred: objectives.pixel_loss(pred, target),
            "rppg": lambda pred: objectives.rppg_recon_loss(pred, target),
            "pretrain": lambda pred: objectives.pretrain_loss(pred, target, PretrainLossCfg(lam=0.5)),
        }
        signal_losses = {
            "neg_pearson": lambda sig: objectives.negative_pearson_loss(sig, gt_sig),
            "freq_ce": lambda sig: objectives.frequency_ce_loss(sig, 10.0, 80.0, ft_cfg),
            "finetune": lambda sig: objectives.finetune_loss(sig, gt_sig, 80.0, 10.0, ft_cfg),
        }

        worst = 0.0
        h = 1e-4
        for loss_fn in recon_losses.values():
            worst = max(worst, _fd_model(mae, lambda: loss_fn(mae.reconstruct(patches, plan)), rng, h))
        for loss_fn in signal_losses.values():
            worst = max(
                worst, _fd_model(reg, lambda: loss_fn(reg.forward(patches[None])), rng, h)
            )
        return worst


def _fd_model(model, loss_builder, rng, h) -> float:
    model.params.zero_grads()
    loss_builder().backward()
    worst = 0.0
    for p in model.params.table.values():
        flat, gflat = p.data.ravel(), p.grad.ravel()
        for i in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_builder().item()
            flat[i] = orig - h
            down = loss_builder().item()
            flat[i] = orig
            worst = max(worst, rel_err(gflat[i], (up - down) / (2 * h)))
    return worst


class TestCriterion2MaskingAlgebra:
    def test_masking_algebra(self):
        rng = np.random.default_rng(2)
        patch_sizes = (2, 4, 8, 16)
        worst = None
        for trial in range(1000):
            patch = int(rng.choice(patch_sizes))
            grid = int(rng.integers(2, 15))
            side = patch * grid
            ratio = float(rng.uniform(0.05, 0.95))
            plan = make_mask_plan(side, patch, ratio, seed=trial)
            union = np.sort(np.concatenate([plan.kept_indices, plan.masked_indices]))
            n = grid * grid
            ok = (
                np.array_equal(union, np.arange(n))
                and plan.kept_indices.size == int(np.floor((1.0 - ratio) * n))
            )
            if not ok:
                worst = (side, patch, ratio)
                break
        round_trip = True
        for trial in range(20):
            channels = int(rng.integers(1, 7))
            patch = int(rng.choice(patch_sizes))
            grid = int(rng.integers(2, 9))
            side = patch * grid
            m = rng.random((side, side, channels))
            round_trip &= np.array_equal(unpatchify(patchify(m, patch), patch, channels), m)
        ok = worst is None and round_trip
        report(
            "criterion 2 (masking algebra)",
            ok,
            f"1000 partitions exact, patchify round-trip bit-exact={round_trip}"
            + (f", first failure {worst}" if worst else ""),
        )


class TestCriterion3ChrominanceNulls:
    def test_chrominance_nulls(self):
        rng = np.random.default_rng(3)
        worst_null = 0.0
        worst_scale = 0.0
        t = np.arange(300) / 30.0
        for _ in range(100):
            c = 100.0 + rng.uniform(1, 20) * np.abs(
                np.sin(2 * np.pi * rng.uniform(0.3, 2.5) * t + rng.uniform(0, 6))
            ) + rng.uniform(0, 2)
            common = np.stack([c, c, c])
            worst_null = max(worst_null, np.max(np.abs(chroma.chrom_project(common))))
            worst_null = max(worst_null, np.max(np.abs(chroma.pos_project(common, 30.0))))

            r = 100 + rng.uniform(1, 8) * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t)
            g = 110 + rng.uniform(1, 8) * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t + 1)
            b = 95 + rng.uniform(1, 8) * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t + 2)
            rgb = np.stack([r, g, b])
            k = rng.uniform(0.5, 3.0)
            worst_scale = max(
                worst_scale, np.max(np.abs(chroma.chrom_project(k * rgb) - chroma.chrom_project(rgb)))
            )
            worst_scale = max(
                worst_scale,
                np.max(np.abs(chroma.pos_project(k * rgb, 30.0) - chroma.pos_project(rgb, 30.0))),
            )
        ok = worst_null <= 1e-9 and worst_scale <= 1e-9
        report(
            "criterion 3 (chrominance nulls)",
            ok,
            f"common-mode max {worst_null:.2e}, scale-invariance max {worst_scale:.2e} (<= 1e-9)",
        )


def snr_db(signal: np.ndarray, fs: float, f0: float) -> float:
    """Periodogram power within +-0.1 Hz of f0 vs the rest of [0.6, 3] Hz."""
    spec = dsp.psd(signal - signal.mean(), fs)
    near = (spec.freqs >= f0 - 0.1) & (spec.freqs <= f0 + 0.1)
    band = (spec.freqs >= 0.6) & (spec.freqs <= 3.0)
    p_in = spec.power[near & band].sum()
    p_out = spec.power[band & ~near].sum()
    return 10.0 * np.log10(p_in / p_out)


class TestCriterion4NoiseRejection:
    def test_noise_rejection(self):
        start = time.time()
        green, pos, chrom_ = [], [], []
        for seed in range(50):
            cfg = SynthConfig(
                hr_bpm=66 + (seed % 30),
                duration_s=20,
                fs=30,
                n_rois=1,
                motion_noise_std=2.0,
                illum_drift_amp=5.0,
                seed=seed,
            )
            traces = gen_roi_traces(gen_bvp(cfg), cfg)
            rgb = traces.traces[0]
            f0 = cfg.hr_bpm / 60.0
            green.append(snr_db(chroma.green_channel(rgb), 30.0, f0))
            pos.append(snr_db(chroma.pos_project(rgb, 30.0), 30.0, f0))
            chrom_.append(snr_db(chroma.chrom_project(rgb), 30.0, f0))
        elapsed = time.time() - start
        g, p, c = np.median(green), np.median(pos), np.median(chrom_)
        ok = (p >= g + 3.0) and (c >= g + 3.0) and elapsed < 60
        report(
            "criterion 4 (noise rejection)",
            ok,
            f"median SNR green {g:.1f} dB, POS {p:.1f} dB, CHROM {c:.1f} dB (>= +3 dB), {elapsed:.0f}s (< 60s)",
        )


class TestCriterion5HrEstimator:
    def test_bvp_accuracy(self):
        worst = 0.0
        for hr in (45.0, 60.0, 72.0, 95.0, 140.0):
            bvp = gen_bvp(SynthConfig(hr_bpm=hr, duration_s=10, fs=30))
            worst = max(worst, abs(pipeline.estimate_hr(bvp.samples, 30.0) - hr))
        ok = worst <= 0.5
        report("criterion 5a (HR on ground-truth BVP)", ok, f"max err {worst:.3f} bpm (<= 0.5)")

    def test_filtered_stmap_columns(self):
        rng = np.random.default_rng(55)
        hits = 0
        for seed in range(50):
            hr = float(rng.uniform(50, 110))
            cfg = SynthConfig(hr_bpm=hr, duration_s=30, fs=10, n_rois=25,
                              white_noise_std=0.5, seed=seed)
            traces = gen_roi_traces(gen_bvp(cfg), cfg)
            m = stmap.build_base_stmap(traces, Variant.FILTERED)
            col = m.data[:, :64, 1].mean(axis=0)  # first 64-frame clip, green channel
            if abs(pipeline.estimate_hr(col, 10.0) - hr) <= 2.0:
                hits += 1
        ok = hits >= 45
        report("criterion 5b (HR on noisy Filtered-STMap columns)", ok, f"{hits}/50 within 2 bpm (>= 45)")


class TestCriterion6PretrainingLearns:
    def test_pretraining_learns(self, pretrained_checkpoint):
        _, _, history, elapsed, cfg = pretrained_checkpoint
        ratio = history[-1] / history[0]
        ma = np.convolve(history, np.ones(5) / 5, mode="valid")
        diffs = np.diff(ma)
        first_full = int(np.ceil(cfg.warmup_epochs))  # windows entirely past warmup
        monotone = bool(np.all(diffs[first_full:] <= 0))
        ok = ratio < 0.6 and monotone and elapsed < 900
        report(
            "criterion 6 (pre-training learns)",
            ok,
            f"epoch-50/epoch-1 = {history[-1]:.4f}/{history[0]:.4f} = {ratio:.3f} (< 0.6), "
            f"MA(5) non-increasing after warmup = {monotone}, {elapsed:.0f}s (< 900s)",
        )


def clip_level_split(sets, fraction, seed):
    """10% of clips across all subjects keep labels (training pool only;
    test subjects stay fully held out)."""
    all_clips = [(s, k) for s in sets for k in range(len(s.clips))]
    order = np.random.default_rng(seed).permutation(len(all_clips))
    chosen = set(order[: int(round(fraction * len(all_clips)))].tolist())
    by_src = {}
    for i in sorted(chosen):
        s, k = all_clips[i]
        by_src.setdefault(s.source_id, (s, []))[1].append(k)
    return [
        StmapClipSet(
            clips=[s.clips[k] for k in ks],
            source_id=sid,
            labels=[s.labels[k] for k in ks],
            hr_gt=s.hr_gt,
            rf_gt=s.rf_gt,
        )
        for sid, (s, ks) in by_src.items()
    ]


class TestCriterion7PretrainingHelps:
    def test_pretraining_helps(self, pretrained_checkpoint):
        train, model, _, _, _ = pretrained_checkpoint
        ckpt = model.params.values()
        test = benchmark_sets(8, seed=77)
        wins = []
        details = []
        for seed in (0, 1, 2):
            labeled = clip_level_split(train, 0.1, seed=500 + seed)
            ft = TrainConfig.finetune_defaults(
                epochs=60, batch_size=8, base_lr=0.02, warmup_epochs=5,
                seed=seed, gamma=0.5, layer_decay=0.5,
            )
            pt_model, _ = pipeline.finetune(labeled, ft, init=ckpt)
            rd_model, _ = pipeline.finetune(labeled, ft, init=None)
            pt = pipeline.evaluate_regressor(pt_model, test)
            rd = pipeline.evaluate_regressor(rd_model, test)
            win = pt.pearson_r > rd.pearson_r and pt.mean_ae < rd.mean_ae
            wins.append(win)
            details.append(
                f"seed{seed}: PT(r={pt.pearson_r:.3f}, mae={pt.mean_ae:.2f}) vs "
                f"RD(r={rd.pearson_r:.3f}, mae={rd.mean_ae:.2f})"
            )
        ok = all(wins)
        report("criterion 7 (pre-training helps)", ok, f"{sum(wins)}/3 wins; " + "; ".join(details))


class TestCriterion8HrvRf:
    def test_hrv_rf(self):
        bvp = gen_bvp(SynthConfig(hr_bpm=72, rf_hz=0.25, duration_s=120, fs=30))
        est = pipeline.estimate_hrv_rf(bvp.samples, 30.0)
        ok = abs(est.rf_hz - 0.25) <= 0.02 and abs(est.lf_nu + est.hf_nu - 1.0) <= 1e-9
        report(
            "criterion 8 (HRV/RF)",
            ok,
            f"rf = {est.rf_hz:.4f} Hz (0.25 +- 0.02), lf_nu+hf_nu = {est.lf_nu + est.hf_nu}",
        )


class TestCriterion9DeterminismFormats:
    def test_determinism_and_formats(self, tmp_path):
        from rppg_lab.cli import main

        cfg = {
            "seed": 9,
            "synth": {"subjects": 2, "clips_per_subject": 1, "duration_s": 30.0, "fs": 10.0,
                      "n_rois": 25, "hr_range": [60, 90], "white_noise_std": 0.1},
            "stmap": {"variant": "PC", "clip_len": 64, "step": 24},
            "train": {"stage": "pretrain", "epochs": 2, "batch_size": 8, "base_lr": 0.04,
                      "warmup_epochs": 1, "profile": "desk"},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))

        identical = True
        for cmd, out_a, out_b, pattern in (
            ("synth", "tr_a", "tr_b", "*.roit"),
            ("stmap", "maps_a", "maps_b", "*.stmp"),
            ("pretrain", "pre_a", "pre_b", "checkpoint.rmae"),
        ):
            for out in (out_a, out_b):
                args = [cmd, "--config", str(cfg_path), "--out", str(tmp_path / out)]
                if cmd != "synth":
                    args += ["--data", str(tmp_path / "tr_a")]
                assert main(args) == 0
            names = sorted(p.name for p in (tmp_path / out_a).glob(pattern))
            assert names, f"no outputs for {cmd}"
            for name in names:
                if (tmp_path / out_a / name).read_bytes() != (tmp_path / out_b / name).read_bytes():
                    identical = False

        bad = tmp_path / "bad.stmp"
        bad.write_bytes(b"XXXX" + b"\x00" * 100)
        try:
            stmap.read_stmap(bad)
            magic_ok = False
        except BadMagicError:
            magic_ok = True
        some_map = sorted((tmp_path / "maps_a").glob("*.stmp"))[0]
        raw = some_map.read_bytes()
        trunc = tmp_path / "trunc.stmp"
        trunc.write_bytes(raw[: len(raw) // 2])
        try:
            stmap.read_stmap(trunc)
            trunc_ok = False
        except TruncatedFileError:
            trunc_ok = True

        ok = identical and magic_ok and trunc_ok
        report(
            "criterion 9 (determinism & formats)",
            ok,
            f"reruns byte-identical={identical}, bad-magic raised={magic_ok}, truncated raised={trunc_ok}",
        )


class TestCriterion10AblationHarness:
    def test_ablation_harness(self, tmp_path):
        train = benchmark_sets(4, seed=41)
        test = benchmark_sets(2, seed=42)
        pre = TrainConfig.pretrain_defaults(epochs=1, batch_size=8, base_lr=0.04,
                                            warmup_epochs=1, seed=1)
        fin = TrainConfig.finetune_defaults(epochs=1, batch_size=8, base_lr=0.02,
                                            warmup_epochs=1, seed=1, gamma=0.5)

        mask_dir = tmp_path / "mask"
        bundle = pipeline.ProtocolBundle(
            train=train, test=test, pretrain_cfg=pre, finetune_cfg=fin,
            ablate_axis="mask_ratio", ablate_values=(0.5, 0.6, 0.7, 0.8, 0.9),
            out_dir=mask_dir,
        )
        pipeline.run_protocol("ablate", bundle)
        mask_rows = (mask_dir / "ablate.csv").read_text().strip().splitlines()

        base = replace(BENCH_BASE, duration_s=30.0)
        traces = []
        rng = np.random.default_rng(43)
        for s in range(4):
            scfg = replace(base, hr_bpm=float(rng.uniform(60, 90)), seed=1000 + s)
            traces.append((f"subj{s:03d}", gen_roi_traces(gen_bvp(scfg), scfg)))
        var_dir = tmp_path / "variant"
        bundle2 = pipeline.ProtocolBundle(
            train=train, test=test, pretrain_cfg=pre, finetune_cfg=fin,
            ablate_axis="variant", ablate_values=("ORIGINAL", "PC"),
            traces=traces, clip_len=64, clip_step=24, folds=4,
            out_dir=var_dir,
        )
        pipeline.run_protocol("ablate", bundle2)
        var_rows = (var_dir / "ablate.csv").read_text().strip().splitlines()

        header_ok = mask_rows[0] == "mask_ratio,mean_ae,rmse,std,r" and var_rows[0].startswith("variant,")
        counts_ok = len(mask_rows) == 6 and len(var_rows) == 3
        parsable = all(len(r.split(",")) == 5 for r in mask_rows[1:] + var_rows[1:])
        ok = header_ok and counts_ok and parsable
        report(
            "criterion 10 (ablation harness)",
            ok,
            f"mask-ratio rows {len(mask_rows) - 1}/5, variant rows {len(var_rows) - 1}/2, well-formed={parsable}",
        )
