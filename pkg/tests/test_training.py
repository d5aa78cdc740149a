"""Masked-training mechanics: exact mask counts, fixed-mask reuse, and the
gradient-descent loop."""

import numpy as np
import pytest

from cassi_ssm import autodiff as ad
from cassi_ssm import cassi, training, unfolding
from cassi_ssm.denoiser import UNetConfig
from cassi_ssm.demo import toy_mask, toy_scene

TINY = UNetConfig(bands=2, base_channels=4, levels=1, blocks_per_level=1,
                  patch=2, cube=(1, 1, 2), state_size=2, expansion=1)


def tiny_setup(seed=0, stages=2, h=8, w=8, zero_residual=True):
    cfg = unfolding.UnfoldConfig(stages=stages, net=TINY, share_weights=True)
    weights = unfolding.init_weights(cfg, seed=seed, zero_residual=zero_residual)
    cube = toy_scene(h, w, TINY.bands, seed=seed + 1)
    op = cassi.SensingOperator(toy_mask(h, w, seed=seed + 2), 2, TINY.bands)
    return cfg, weights, cube, op


class TestGenerateMask:
    @pytest.mark.parametrize("ratio", [0.3, 0.5, 0.8])
    def test_exact_zero_count(self, ratio):
        fm = training.generate_mask(4, 4, ratio, seed=1)
        assert (fm.values == 0).sum() == round(ratio * 16)
        assert set(np.unique(fm.values)) <= {0.0, 1.0}

    def test_half_on_4x4(self):
        fm = training.generate_mask(4, 4, 0.5, seed=2)
        assert (fm.values == 0).sum() == 8

    def test_zero_ratio_all_ones(self):
        fm = training.generate_mask(3, 5, 0.0, seed=3)
        assert fm.values.all()

    def test_eighty_percent_of_ten(self):
        fm = training.generate_mask(2, 5, 0.8, seed=4)
        assert (fm.values == 0).sum() == 8

    def test_deterministic_under_seed(self):
        a = training.generate_mask(6, 6, 0.5, seed=5)
        b = training.generate_mask(6, 6, 0.5, seed=5)
        assert np.array_equal(a.values, b.values)
        assert a.digest() == b.digest()

    def test_ratio_range(self):
        with pytest.raises(ValueError, match="zero ratio"):
            training.generate_mask(4, 4, 1.0, seed=0)


class TestApplyMask:
    def test_all_ones_is_identity(self):
        fm = training.generate_mask(4, 4, 0.0, seed=0)
        x = np.random.default_rng(1).random((3, 4, 4))
        assert np.array_equal(training.apply_mask(ad.constant(x), fm).value, x)

    def test_masked_positions_exactly_zero(self):
        fm = training.generate_mask(4, 4, 0.5, seed=2)
        x = np.random.default_rng(3).random((3, 4, 4)) + 1.0
        out = training.apply_mask(ad.constant(x), fm).value
        zero_at = fm.values == 0
        assert (out[:, zero_at] == 0).all()
        assert np.array_equal(out[:, ~zero_at], x[:, ~zero_at])

    def test_idempotent(self):
        fm = training.generate_mask(4, 4, 0.5, seed=4)
        x = np.random.default_rng(5).random((2, 4, 4))
        once = training.apply_mask(ad.constant(x), fm).value
        twice = training.apply_mask(ad.constant(once), fm).value
        assert np.array_equal(once, twice)

    def test_gradient_zero_at_masked_positions(self):
        fm = training.generate_mask(4, 4, 0.5, seed=6)
        rng = np.random.default_rng(7)
        x = ad.parameter(rng.random((2, 4, 4)))
        proj = rng.normal(size=(2, 4, 4))
        ad.backward(ad.sum_all(ad.mul(training.apply_mask(x, fm), ad.constant(proj))))
        zero_at = fm.values == 0
        assert (x.grad[:, zero_at] == 0).all()
        assert np.any(x.grad[:, ~zero_at])

    def test_gradient_elsewhere_matches_fd(self):
        fm = training.generate_mask(4, 4, 0.5, seed=8)
        rng = np.random.default_rng(9)
        proj = rng.normal(size=(2, 4, 4))

        def f(t):
            return ad.sum_all(ad.mul(training.apply_mask(t, fm), ad.constant(proj)))

        assert ad.finite_diff_check(f, rng.random((2, 4, 4)), eps=1e-6) <= 1e-4

    def test_shape_guard(self):
        fm = training.generate_mask(4, 4, 0.5, seed=10)
        with pytest.raises(ValueError, match="mask shape"):
            training.apply_mask(ad.constant(np.zeros((2, 8, 8))), fm)


class TestTrainStep:
    def test_zero_learning_rate_leaves_weights(self):
        cfg, weights, cube, op = tiny_setup()
        before = {k: v.value.copy() for k, v in weights.items()}
        tc = training.TrainConfig(learning_rate=0.0, steps=4)
        loss = training.train_step([(cube, op)], weights, cfg, tc, lr=0.0)
        assert np.isfinite(loss)
        for k, v in weights.items():
            assert np.array_equal(v.value, before[k])

    def test_bit_identical_across_runs(self):
        losses = []
        finals = []
        for _ in range(2):
            cfg, weights, cube, op = tiny_setup(seed=3)
            tc = training.TrainConfig(learning_rate=0.02, steps=3)
            state = training.train([(cube, op)], weights, cfg, tc)
            losses.append(tuple(state.losses))
            finals.append(weights["shared/out/w"].value.copy())
        assert losses[0] == losses[1]
        assert np.array_equal(finals[0], finals[1])

    def test_loss_decreases_on_short_overfit(self):
        cfg, weights, cube, op = tiny_setup(seed=4)
        tc = training.TrainConfig(learning_rate=0.02, steps=25)
        state = training.train([(cube, op)], weights, cfg, tc)
        assert state.losses[-1] < state.losses[0]

    def test_estimation_scalars_receive_gradients(self):
        cfg, weights, cube, op = tiny_setup(seed=5)
        tc = training.TrainConfig(learning_rate=0.02, steps=3)
        training.train([(cube, op)], weights, cfg, tc)
        # after the residual head moves off zero, both scalars must learn
        weights.zero_grad()
        y = cassi.forward_project(cube, op)
        recon = unfolding.reconstruct_node(y, op, weights, cfg)
        err = ad.sub(recon, ad.constant(cube))
        ad.backward(ad.mean_all(ad.mul(err, err)))
        for k in range(cfg.stages):
            assert float(np.abs(weights[f"est/alpha_raw{k}"].grad)) > 0
            assert float(np.abs(weights[f"est/beta_raw{k}"].grad)) > 0

    def test_empty_batch_rejected(self):
        cfg, weights, _, _ = tiny_setup()
        with pytest.raises(ValueError, match="empty"):
            training.train_step([], weights, cfg, training.TrainConfig())

    def test_non_finite_weight_diagnostic_names_tensor(self):
        cfg, weights, cube, op = tiny_setup()
        weights["shared/out/b"].value = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError, match="shared/out/b"):
            training.train_step([(cube, op)], weights, cfg, training.TrainConfig())


class TestMaskedMode:
    def test_masked_off_is_bit_identical_to_unmasked(self):
        runs = []
        for masked in (False, None):
            cfg, weights, cube, op = tiny_setup(seed=6)
            tc = training.TrainConfig(learning_rate=0.03, steps=3, masked=bool(masked))
            state = training.train([(cube, op)], weights, cfg, tc)
            runs.append((tuple(state.losses), weights["shared/out/w"].value.copy()))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])

    def test_same_mask_digest_at_every_step_and_eval(self):
        cfg, weights, cube, op = tiny_setup(seed=7)
        tc = training.TrainConfig(learning_rate=0.03, steps=4, masked=True,
                                  zero_ratio=0.5, mask_seed=9)
        state = training.train([(cube, op)], weights, cfg, tc)
        assert len(set(state.mask_digests)) == 1
        eval_mask = training.generate_mask(8, 8, 0.5, seed=9)
        assert eval_mask.digest() == state.mask_digests[0]

    def test_masked_training_stays_finite(self):
        cfg, weights, cube, op = tiny_setup(seed=8)
        tc = training.TrainConfig(learning_rate=0.03, steps=6, masked=True, mask_seed=3)
        state = training.train([(cube, op)], weights, cfg, tc)
        assert np.isfinite(state.losses).all()

    def test_masked_changes_training_when_residual_active(self):
        results = []
        for masked in (False, True):
            cfg, weights, cube, op = tiny_setup(seed=9, zero_residual=False)
            tc = training.TrainConfig(learning_rate=0.02, steps=2, masked=masked)
            state = training.train([(cube, op)], weights, cfg, tc)
            results.append(state.losses[-1])
        assert results[0] != results[1]

    def test_resample_flag_changes_masks(self):
        cfg, weights, cube, op = tiny_setup(seed=10)
        tc = training.TrainConfig(learning_rate=0.0, steps=3, masked=True,
                                  resample_mask_per_step=True)
        state = training.train([(cube, op)], weights, cfg, tc)
        assert len(set(state.mask_digests)) == 3


class TestSchedule:
    def test_cosine_endpoints(self):
        tc = training.TrainConfig(learning_rate=2.0, steps=11)
        assert tc.lr_at(0) == pytest.approx(2.0)
        assert tc.lr_at(10) == pytest.approx(0.0, abs=1e-12)
        assert tc.lr_at(5) == pytest.approx(1.0)

    def test_shot_noise_option_runs(self):
        cfg, weights, cube, op = tiny_setup(seed=11)
        tc = training.TrainConfig(learning_rate=0.02, steps=2, noise_bits=11)
        state = training.train([(cube, op)], weights, cfg, tc)
        assert np.isfinite(state.losses).all()
