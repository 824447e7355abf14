import numpy as np
import pytest

from sfgrad import autodiff as ad
from sfgrad.errors import DataError, NumericalError
from sfgrad.fno import init_params, named_arrays, normalized_coords, zeroed_projection
from sfgrad.geometry import AttentionWeightMap, CameraModel, DepthMap, NormalMap, \
    normals_from_depth
from sfgrad.training import (
    AugmentConfig,
    DatasetSpec,
    EpochStats,
    TrainConfig,
    _detail_loss_t,
    detail_weighted_loss,
    epoch_lr,
    grad_check,
    multires_loss,
    sample_loss,
    synth_dataset,
    train_toy,
    write_loss_history,
)


def flat_omega(h, w, value):
    return AttentionWeightMap(np.full((h, w), value), np.ones((h, w), bool))


def cam_ortho(n):
    return CameraModel("orthographic", n, n)


class TestDetailWeightedLoss:
    def test_zero_at_truth(self):
        rng = np.random.default_rng(0)
        z = DepthMap(1.0 + 0.1 * rng.random((8, 8)), np.ones((8, 8), bool))
        for w in (0.0, 0.3, 1.0):
            assert detail_weighted_loss(z, z, flat_omega(8, 8, w), cam_ortho(8)) == 0.0

    def test_omega_zero_reduces_to_l1(self):
        gt = DepthMap(np.ones((6, 6)), np.ones((6, 6), bool))
        z = DepthMap(np.ones((6, 6)) + 0.5, np.ones((6, 6), bool))
        loss = detail_weighted_loss(z, gt, flat_omega(6, 6, 0.0), cam_ortho(6))
        assert loss == pytest.approx(0.5)

    def test_omega_one_pure_normal_term(self):
        n = 4
        cam = cam_ortho(n)
        a = 0.75
        u = normalized_coords(cam)[..., 0]
        gt = DepthMap(1.0 + a * u, np.ones((n, n), bool))
        z = DepthMap(np.full((n, n), 1.0), np.ones((n, n), bool))
        # constant plane normal (0,0,1) vs tilted (-a,0,1)/sqrt(1+a^2):
        s = 1.0 / np.sqrt(1.0 + a * a)
        gap = a * s + abs(s - 1.0)
        loss = detail_weighted_loss(z, gt, flat_omega(n, n, 1.0), cam, gamma=0.25)
        assert loss == pytest.approx(0.25 * gap, rel=1e-10)

    def test_empty_mask_rejected(self):
        z = DepthMap(np.ones((4, 4)), np.zeros((4, 4), bool))
        with pytest.raises(DataError):
            detail_weighted_loss(z, z, AttentionWeightMap(np.zeros((4, 4)),
                                                          np.zeros((4, 4), bool)),
                                 cam_ortho(4))

    def test_omega_gradient_sign(self):
        # dL/dw_i carries the sign of gamma*normal_term - depth_term
        n = 6
        cam = cam_ortho(n)
        u = normalized_coords(cam)[..., 0]
        gt = DepthMap(1.0 + 0.5 * u, np.ones((n, n), bool))
        z_vals = np.full((n, n), 1.0)
        gamma = 0.25
        omega = ad.parameter(np.full((n, n), 0.4))
        mask = np.ones((n, n), bool)
        loss = _detail_loss_t(ad.wrap(z_vals), omega, gt, mask, cam, gamma)
        loss.backward()
        # per-pixel terms evaluated directly
        depth_term = np.abs(z_vals - gt.values)
        n_gt = normals_from_depth(gt, cam)
        n_est = normals_from_depth(DepthMap(z_vals, mask), cam)
        gap = np.abs(n_est.normals - n_gt.normals).sum(axis=-1)
        expected_sign = np.sign(gamma * gap - depth_term)
        got_sign = np.sign(omega.grad)
        agree = expected_sign == got_sign
        assert agree[np.abs(gamma * gap - depth_term) > 1e-9].all()


class TestMultiresLoss:
    def test_single_level_equals_detail_loss(self):
        rng = np.random.default_rng(1)
        gt = DepthMap(1.0 + 0.1 * rng.random((8, 8)), np.ones((8, 8), bool))
        z = DepthMap(1.0 + 0.1 * rng.random((8, 8)), np.ones((8, 8), bool))
        w = flat_omega(8, 8, 0.3)
        assert multires_loss([(z, w)], [gt], cam_ortho(8)) == pytest.approx(
            detail_weighted_loss(z, gt, w, cam_ortho(8)))

    def test_all_levels_perfect(self):
        gt8 = DepthMap(np.ones((8, 8)), np.ones((8, 8), bool))
        gt4 = DepthMap(np.ones((4, 4)), np.ones((4, 4), bool))
        outs = [(gt4, flat_omega(4, 4, 0.5)), (gt8, flat_omega(8, 8, 0.5))]
        assert multires_loss(outs, [gt4, gt8], cam_ortho(8)) == 0.0

    def test_two_levels_sum(self):
        rng = np.random.default_rng(2)
        gt8 = DepthMap(1.0 + 0.2 * rng.random((8, 8)), np.ones((8, 8), bool))
        gt4 = DepthMap(1.0 + 0.2 * rng.random((4, 4)), np.ones((4, 4), bool))
        z8 = DepthMap(1.0 + 0.2 * rng.random((8, 8)), np.ones((8, 8), bool))
        z4 = DepthMap(1.0 + 0.2 * rng.random((4, 4)), np.ones((4, 4), bool))
        w8, w4 = flat_omega(8, 8, 0.2), flat_omega(4, 4, 0.7)
        a = detail_weighted_loss(z4, gt4, w4, cam_ortho(4))
        b = detail_weighted_loss(z8, gt8, w8, cam_ortho(8))
        total = multires_loss([(z4, w4), (z8, w8)], [gt4, gt8], cam_ortho(8))
        assert total == pytest.approx(a + b)


def toy_sample(seed=3):
    # base depth away from the initial estimate keeps |z - gt| clear of the
    # L1 kink band during finite-difference checks
    spec = DatasetSpec(count=1, height=16, width=16, kinds=("bump",), base_depth=1.3)
    return synth_dataset(spec, seed=seed)[0]


class TestGradCheck:
    def test_full_pipeline_toy(self):
        params = init_params(seed=1, width=8, attention_width=4, k_max=4)
        report = grad_check(params, toy_sample(), eps=1e-5, n_coords=4, seed=0)
        assert report.passed, report.failures
        assert report.max_rel_error < 1e-3

    def test_zero_network_trivial_gradients(self):
        # with a zeroed projection the depth stays at the initial constant,
        # so lift gradients vanish and match finite differences trivially
        params = zeroed_projection(init_params(seed=0, width=8, attention_width=4, k_max=4))
        report = grad_check(params, toy_sample(), eps=1e-5, n_coords=3, seed=1)
        assert report.per_tensor["lift.0.bias"] < 1e-4

    def test_eps_sweep_behaves(self):
        params = init_params(seed=2, width=8, attention_width=4, k_max=4)
        errs = [grad_check(params, toy_sample(), eps=e, n_coords=2, seed=3).max_rel_error
                for e in (1e-4, 1e-5, 1e-6)]
        # the middle step size is never the worst of the three
        assert errs[1] <= max(errs[0], errs[2]) * 1.5

    def test_refuses_large_configs(self):
        params = init_params(seed=0, width=16, attention_width=4, k_max=4)
        with pytest.raises(DataError):
            grad_check(params, toy_sample(), n_coords=1)


class TestSynthDataset:
    def test_plane_constant_normals(self):
        spec = DatasetSpec(count=1, height=16, width=16, kinds=("plane",))
        s = synth_dataset(spec, seed=0)[0]
        n = s.normals.normals[s.normals.mask]
        assert np.abs(n - n[0]).max() < 1e-12

    def test_hemisphere_analytic_normals(self):
        spec = DatasetSpec(count=1, height=64, width=64, kinds=("hemisphere:0.8",))
        s = synth_dataset(spec, seed=0)[0]
        cam = s.cam
        grid = normalized_coords(cam)
        u, v = grid[..., 0], grid[..., 1]
        r = 0.8
        inside = (u ** 2 + v ** 2) <= (0.7 * r) ** 2
        sq = np.sqrt(r ** 2 - u ** 2 - v ** 2, where=inside, out=np.zeros_like(u))
        expected = np.stack([u / r, v / r, sq / r], axis=-1)
        got = s.normals.normals
        assert np.abs(got[inside] - expected[inside]).max() < 1e-12

    def test_deterministic(self):
        spec = DatasetSpec(count=4, height=32, width=32)
        a = synth_dataset(spec, seed=5)
        b = synth_dataset(spec, seed=5)
        for sa, sb in zip(a, b):
            assert (sa.depth.values == sb.depth.values).all()
            assert (sa.normals.normals == sb.normals.normals).all()
            assert (sa.normals.mask == sb.normals.mask).all()

    def test_geometry_consistency(self):
        # stored analytic normals match normals_from_depth up to O(h^2)
        spec = DatasetSpec(count=3, height=64, width=64,
                           kinds=("plane", "bump", "sinusoid"))
        for s in synth_dataset(spec, seed=1):
            nm = normals_from_depth(s.depth, s.cam)
            inner = np.zeros(s.depth.shape, dtype=bool)
            inner[2:-2, 2:-2] = True
            sel = inner & nm.mask & s.normals.mask
            gap = np.abs(nm.normals - s.normals.normals).max(axis=-1)
            assert gap[sel].max() < 5e-3

    def test_zero_patch_masks_out(self):
        aug = AugmentConfig(zero_patch_count=1, zero_patch_size=10)
        spec = DatasetSpec(count=1, height=32, width=32, kinds=("plane",), augment=aug)
        s = synth_dataset(spec, seed=0)[0]
        assert (~s.normals.mask).sum() == 100

    def test_noise_renormalizes(self):
        aug = AugmentConfig(noise_sigma=0.05)
        spec = DatasetSpec(count=1, height=32, width=32, kinds=("bump",), augment=aug)
        s = synth_dataset(spec, seed=0)[0]
        norms = np.linalg.norm(s.normals.normals[s.normals.mask], axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        clean = synth_dataset(DatasetSpec(count=1, height=32, width=32,
                                          kinds=("bump",)), seed=0)[0]
        assert np.abs(s.normals.normals - clean.normals.normals).max() > 1e-3


class TestTrainToy:
    def test_zero_epochs_returns_initial_params(self):
        spec = DatasetSpec(count=10, height=32, width=32)
        ds = synth_dataset(spec, seed=0)
        cfg = TrainConfig(epochs=0, seed=0)
        params, history = train_toy(cfg, ds, width=8, attention_width=4, k_max=8)
        ref = init_params(seed=0, width=8, attention_width=4, k_max=8)
        for (name, a), (_, b) in zip(named_arrays(params), named_arrays(ref)):
            assert (a == b).all(), name
        assert len(history) == 1

    def test_lr_schedule(self):
        cfg = TrainConfig(seed=0)
        assert epoch_lr(cfg, 0) == pytest.approx(2e-3)
        assert epoch_lr(cfg, 3) == pytest.approx(1.458e-3)

    def test_determinism(self):
        spec = DatasetSpec(count=10, height=32, width=32)
        ds = synth_dataset(spec, seed=1)
        cfg = TrainConfig(epochs=1, batch_size=5, seed=2)
        p1, h1 = train_toy(cfg, ds, width=8, attention_width=4, k_max=8)
        p2, h2 = train_toy(cfg, ds, width=8, attention_width=4, k_max=8)
        for (name, a), (_, b) in zip(named_arrays(p1), named_arrays(p2)):
            assert (a == b).all(), name
        assert [(s.train_loss, s.val_loss) for s in h1] == \
               [(s.train_loss, s.val_loss) for s in h2]

    def test_loss_decreases_on_tiny_run(self):
        spec = DatasetSpec(count=20, height=32, width=32)
        ds = synth_dataset(spec, seed=3)
        cfg = TrainConfig(epochs=2, batch_size=10, seed=0)
        _, history = train_toy(cfg, ds, width=8, attention_width=4, k_max=8)
        assert history[-1].val_loss < history[0].val_loss

    def test_divergence_aborts(self):
        spec = DatasetSpec(count=6, height=32, width=32)
        ds = synth_dataset(spec, seed=0)
        cfg = TrainConfig(epochs=3, batch_size=3, seed=0, lr_max=1e9)
        with pytest.raises(NumericalError):
            with np.errstate(all="ignore"):
                train_toy(cfg, ds, width=8, attention_width=4, k_max=8)

    def test_loss_history_csv(self, tmp_path):
        rows = [EpochStats(0, 1.0, 2.0), EpochStats(1, 0.5, 0.75)]
        path = tmp_path / "hist.csv"
        write_loss_history(path, rows)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert lines[1].startswith("0,1,2")


def test_sample_loss_nonnegative():
    params = init_params(seed=0, width=8, attention_width=4, k_max=4)
    assert sample_loss(params, toy_sample()) >= 0.0
