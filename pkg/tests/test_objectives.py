import numpy as np
import pytest

from _util import fd_check_input
from rppg_lab import objectives as O
from rppg_lab.errors import EmptyMaskError, HrOutOfRangeError, LengthMismatchError
from rppg_lab.nn import tensor as T
from rppg_lab.stmap import STMap, Variant, make_mask_plan, patchify, unpatchify
from rppg_lab.stmap import MaskPlan


def make_target(side=16, patch=4, channels=3, ratio=0.75, seed=0, map_seed=1):
    rng = np.random.default_rng(map_seed)
    data = rng.random((side, side, channels))
    plan = make_mask_plan(side, patch, ratio, seed=seed)
    m = STMap(data=data, fs=30.0, variant=Variant.ORIGINAL)
    return O.make_recon_target(m, plan), data


def all_masked_plan(side=16, patch=4, seed=0):
    """Legal plan with every patch masked (keeps floor((1-R)*G^2) = 0)."""
    grid = side // patch
    plan = make_mask_plan(side, patch, 1 - 0.5 / (grid * grid), seed=seed)
    assert plan.kept_indices.size == 0
    return plan


class TestPixelLoss:
    def test_identity_zero(self):
        target, _ = make_target()
        assert O.pixel_loss(target.gt_patches, target).item() == 0.0

    def test_unit_error_on_masked(self):
        target, _ = make_target()
        pred = target.gt_patches.copy()
        pred[target.plan.masked_indices] = target.gt_patches[target.plan.masked_indices] + 1.0
        assert abs(O.pixel_loss(pred, target).item() - 1.0) < 1e-12

    def test_kept_changes_ignored(self):
        target, _ = make_target()
        pred = target.gt_patches.copy()
        pred[target.plan.kept_indices] += 5.0
        assert O.pixel_loss(pred, target).item() == 0.0

    def test_empty_mask(self):
        side, patch = 16, 4
        plan = make_mask_plan(side, patch, 0.01, seed=0)  # keeps floor(0.99*16)=15
        plan = MaskPlan(patch_size=patch, grid=4, kept_indices=np.arange(16),
                        masked_indices=np.array([], dtype=int), seed=0)
        data = np.random.default_rng(2).random((side, side, 3))
        target = O.ReconTarget(gt_patches=patchify(data, patch), plan=plan, gt_map=data, channels=3)
        with pytest.raises(EmptyMaskError):
            O.pixel_loss(target.gt_patches, target)


class TestRppgReconLoss:
    def test_identity_zero(self):
        target, _ = make_target()
        pred = np.random.default_rng(3).random(target.gt_patches.shape)
        # prediction is irrelevant at kept positions; make masked == gt
        pred[target.plan.masked_indices] = target.gt_patches[target.plan.masked_indices]
        assert O.rppg_recon_loss(pred, target).item() < 1e-9

    def test_sign_flip_gives_two(self):
        plan = all_masked_plan()
        data = np.random.default_rng(4).random((16, 16, 3))
        m = STMap(data=data, fs=30.0, variant=Variant.ORIGINAL)
        target = O.make_recon_target(m, plan)
        flipped = patchify(-(data - data.mean(axis=1, keepdims=True)), 4)
        assert abs(O.rppg_recon_loss(flipped, target).item() - 2.0) < 1e-6

    def test_affine_invariance(self):
        plan = all_masked_plan(seed=5)
        data = np.random.default_rng(5).random((16, 16, 3))
        m = STMap(data=data, fs=30.0, variant=Variant.ORIGINAL)
        target = O.make_recon_target(m, plan)
        pred = patchify(2.0 * data + 5.0, 4)
        assert O.rppg_recon_loss(pred, target).item() < 1e-6

    def test_degenerate_rows_contribute_one(self):
        plan = all_masked_plan(seed=6)
        data = np.random.default_rng(6).random((16, 16, 1))
        m = STMap(data=data, fs=30.0, variant=Variant.ORIGINAL)
        target = O.make_recon_target(m, plan)
        flat = patchify(np.full((16, 16, 1), 0.25), 4)  # constant prediction
        assert abs(O.rppg_recon_loss(flat, target).item() - 1.0) < 1e-9

    def test_kept_positions_insensitive(self):
        target, _ = make_target(seed=7)
        rng = np.random.default_rng(8)
        pred = rng.random(target.gt_patches.shape)
        base = O.rppg_recon_loss(pred, target).item()
        pred2 = pred.copy()
        pred2[target.plan.kept_indices] = rng.random((target.plan.kept_indices.size, 48))
        assert O.rppg_recon_loss(pred2, target).item() == base


class TestPretrainLoss:
    def test_endpoints_and_mix(self):
        target, _ = make_target(seed=9)
        pred = np.random.default_rng(10).random(target.gt_patches.shape)
        pix = O.pixel_loss(pred, target).item()
        rp = O.rppg_recon_loss(pred, target).item()
        assert O.pretrain_loss(pred, target, O.PretrainLossCfg(lam=1.0)).item() == pix
        assert O.pretrain_loss(pred, target, O.PretrainLossCfg(lam=0.0)).item() == rp
        mixed = O.pretrain_loss(pred, target, O.PretrainLossCfg(lam=0.5)).item()
        assert abs(mixed - (0.5 * pix + 0.5 * rp)) < 1e-12


class TestNegativePearson:
    def test_identity_and_flip(self):
        x = np.random.default_rng(11).standard_normal(64)
        assert O.negative_pearson_loss(x, x).item() < 1e-9
        assert abs(O.negative_pearson_loss(-x, x).item() - 2.0) < 1e-9

    def test_orthogonal_gives_one(self):
        n, fs = 300, 30.0
        t = np.arange(n) / fs
        assert abs(O.negative_pearson_loss(np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)).item() - 1.0) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            O.negative_pearson_loss(np.ones(5), np.ones(6))

    def test_range_bounds(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            a, b = rng.standard_normal(32), rng.standard_normal(32)
            v = O.negative_pearson_loss(a, b).item()
            assert 0.0 <= v <= 2.0


class TestFrequencyCe:
    def test_clean_long_tone_concentrates(self):
        # 60 s tone at the gt rate: spectral resolution 1/60 Hz = 1 bpm,
        # so nearly all in-band mass rounds into the gt bin
        fs, dur, hr = 30.0, 60.0, 72.0
        t = np.arange(int(fs * dur)) / fs
        tone = np.sin(2 * np.pi * (hr / 60.0) * t)
        loss = O.frequency_ce_loss(tone, fs, hr, O.FinetuneLossCfg()).item()
        assert loss < 0.5

    def test_white_noise_mean_near_log_bins(self):
        # flat spectrum -> p ~ uniform over the 145 bins; the chi-square
        # fluctuation bias shrinks with clip length (Monte-Carlo oracle)
        fs, n = 10.0, 2400
        cfg = O.FinetuneLossCfg()
        vals = [
            O.frequency_ce_loss(np.random.default_rng(seed).standard_normal(n), fs, 90.0, cfg).item()
            for seed in range(100)
        ]
        assert abs(np.mean(vals) - np.log(145)) < 0.3

    def test_hr_out_of_range(self):
        with pytest.raises(HrOutOfRangeError):
            O.frequency_ce_loss(np.random.default_rng(0).standard_normal(300), 30.0, 30.0,
                                O.FinetuneLossCfg())

    def test_n_bins(self):
        assert O.FinetuneLossCfg().n_bins == 145


class TestFinetuneLoss:
    def test_endpoints_and_mix(self):
        rng = np.random.default_rng(13)
        pred = rng.standard_normal(64)
        gt = rng.standard_normal(64)
        cfg1 = O.FinetuneLossCfg(gamma=1.0)
        cfg0 = O.FinetuneLossCfg(gamma=0.0)
        cfg_half = O.FinetuneLossCfg(gamma=0.5)
        lp = O.negative_pearson_loss(pred, gt).item()
        lf = O.frequency_ce_loss(pred, 10.0, 72.0, cfg0).item()
        assert O.finetune_loss(pred, gt, 72.0, 10.0, cfg1).item() == lp
        assert O.finetune_loss(pred, gt, 72.0, 10.0, cfg0).item() == lf
        combo = O.finetune_loss(pred, gt, 72.0, 10.0, cfg_half).item()
        assert abs(combo - (0.5 * lp + 0.5 * lf)) < 1e-12


class TestLossGradients:
    def check(self, build, x0, seed=0, tol=2e-6):
        rng = np.random.default_rng(seed)
        x = T.parameter(x0.copy(), dtype=np.float64)

        def loss_fn():
            return build(x).item()

        out = build(x)
        x.zero_grad()
        out.backward()
        worst = fd_check_input(loss_fn, x.data, x.grad, rng, n_coords=12)
        assert worst < tol, f"FD mismatch {worst}"

    def test_pixel_grad(self):
        target, _ = make_target(seed=14)
        x0 = np.random.default_rng(15).random(target.gt_patches.shape)
        self.check(lambda x: O.pixel_loss(x, target), x0)

    def test_rppg_grad(self):
        target, _ = make_target(seed=16)
        x0 = np.random.default_rng(17).random(target.gt_patches.shape)
        self.check(lambda x: O.rppg_recon_loss(x, target), x0)

    def test_pretrain_grad(self):
        target, _ = make_target(seed=18)
        x0 = np.random.default_rng(19).random(target.gt_patches.shape)
        self.check(lambda x: O.pretrain_loss(x, target, O.PretrainLossCfg(lam=0.5)), x0)

    def test_negative_pearson_grad(self):
        gt = np.random.default_rng(20).standard_normal(32)
        x0 = np.random.default_rng(21).standard_normal(32)
        self.check(lambda x: O.negative_pearson_loss(x, gt), x0)

    def test_frequency_ce_grad(self):
        x0 = np.random.default_rng(22).standard_normal(48)
        cfg = O.FinetuneLossCfg()
        self.check(lambda x: O.frequency_ce_loss(x, 10.0, 80.0, cfg), x0)

    def test_finetune_grad(self):
        gt = np.random.default_rng(23).standard_normal(48)
        x0 = np.random.default_rng(24).standard_normal(48)
        cfg = O.FinetuneLossCfg(gamma=0.5)
        self.check(lambda x: O.finetune_loss(x, gt, 75.0, 10.0, cfg), x0)
