import warnings

import numpy as np
import pytest
import scipy.io
import scipy.sparse
import scipy.sparse.linalg as spla

from sfgrad.errors import DataError
from sfgrad.evaluate import mae_mm
from sfgrad.geometry import AttentionWeightMap, CameraModel, DepthMap, NormalMap, \
    normalized_coords
from sfgrad.discontinuity import (
    DirectionalWeights,
    SparseSystem,
    assemble_system,
    directional_weights_from_attention,
    dump_system,
    refine,
    sigmoid_weights,
    solve_cg,
)

DIRS = {"right": (0, 1), "left": (0, -1), "top": (-1, 0), "bottom": (1, 0)}


def flat_normals(h, w, mask=None):
    n = np.zeros((h, w, 3))
    n[..., 2] = 1.0
    mask = np.ones((h, w), bool) if mask is None else mask
    return NormalMap(np.where(mask[..., None], n, 0), mask)


def random_instance(seed, h=6, w=6, holes=True):
    rng = np.random.default_rng(seed)
    mask = np.ones((h, w), bool)
    if holes:
        mask[rng.integers(0, h), rng.integers(0, w)] = False
    n = rng.normal(size=(h, w, 3))
    n[..., 2] = np.abs(n[..., 2]) + 0.5
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    nm = NormalMap(np.where(mask[..., None], n, 0), mask)
    zr = DepthMap(rng.normal(1.0, 0.1, (h, w)), mask)
    wdict = {}
    for k, (di, dj) in DIRS.items():
        ok = np.zeros_like(mask)
        ok[max(-di, 0):h - max(di, 0), max(-dj, 0):w - max(dj, 0)] = \
            mask[max(di, 0):h - max(-di, 0), max(dj, 0):w - max(-dj, 0)]
        wdict[k] = np.where(mask & ok, rng.random((h, w)), 0.0)
    return nm, zr, DirectionalWeights(**wdict), mask


def brute_force_system(nm, cam, w, zr, lam):
    """Dense assembly of the Stage II normal equations by explicit loops."""
    mask = nm.mask & zr.mask
    h, wd = mask.shape
    idx = -np.ones(mask.shape, dtype=int)
    n_px = int(mask.sum())
    idx[mask] = np.arange(n_px)
    delta = cam.cell_size
    n1, n2, n3 = (nm.normals[..., c] for c in range(3))
    m = np.zeros((n_px, n_px))
    b = np.zeros(n_px)
    for name, (di, dj) in DIRS.items():
        ndir = n1 if dj != 0 else n2
        weight = getattr(w, name)
        for i in range(h):
            for j in range(wd):
                if not mask[i, j]:
                    continue
                ii, jj = i + di, j + dj
                if not (0 <= ii < h and 0 <= jj < wd and mask[ii, jj]):
                    continue
                row = np.zeros(n_px)
                sign = 1.0 if (di + dj) > 0 else -1.0
                row[idx[ii, jj]] += sign * n3[i, j] / delta
                row[idx[i, j]] -= sign * n3[i, j] / delta
                m += 0.5 * weight[i, j] * np.outer(row, row)
                b += 0.5 * weight[i, j] * row * (-ndir[i, j])
    m += lam * np.eye(n_px)
    b += lam * zr.values[mask]
    return m, b


class TestDirectionalWeights:
    def test_uniform_attention_full_mask(self):
        omega = AttentionWeightMap(np.ones((4, 4)), np.ones((4, 4), bool))
        w = directional_weights_from_attention(omega)
        assert (w.right[:, :-1] == 1.0).all() and (w.right[:, -1] == 0.0).all()
        assert (w.left[:, 1:] == 1.0).all() and (w.left[:, 0] == 0.0).all()
        assert (w.top[1:, :] == 1.0).all() and (w.top[0, :] == 0.0).all()
        assert (w.bottom[:-1, :] == 1.0).all() and (w.bottom[-1, :] == 0.0).all()

    def test_single_zero_pixel_blocks_neighbors(self):
        vals = np.ones((5, 5))
        vals[2, 2] = 0.0
        w = directional_weights_from_attention(
            AttentionWeightMap(vals, np.ones((5, 5), bool)))
        assert w.right[2, 1] == 0.0  # left neighbor looks right into the zero
        assert w.left[2, 3] == 0.0
        assert w.top[3, 2] == 0.0
        assert w.bottom[1, 2] == 0.0
        assert w.right[1, 1] == 1.0

    def test_all_zero_attention(self):
        w = directional_weights_from_attention(
            AttentionWeightMap(np.zeros((4, 4)), np.ones((4, 4), bool)))
        for name in DIRS:
            assert (getattr(w, name) == 0.0).all()


class TestSigmoidWeights:
    def test_smooth_region_half(self):
        cam = CameraModel("orthographic", 8, 8)
        u = normalized_coords(cam)[..., 0]
        z = DepthMap(1.0 + 0.2 * u, np.ones((8, 8), bool))
        w = sigmoid_weights(z, np.ones((8, 8)), k=2.0)
        inner = w.right[1:-1, 1:-1]
        np.testing.assert_allclose(inner, 0.5, atol=1e-3)

    def test_step_antisymmetry(self):
        z_vals = np.tile([1.0, 1.0, 3.0, 3.0], (3, 1))
        z = DepthMap(z_vals, np.ones((3, 4), bool))
        w = sigmoid_weights(z, np.ones((3, 4)), k=2.0)
        crossing = w.right[1, 1]   # looks across the jump
        opposite = w.left[1, 1]
        assert crossing < 0.5 < opposite
        assert crossing + opposite == pytest.approx(1.0)

    def test_k_zero_gives_half(self):
        rng = np.random.default_rng(0)
        z = DepthMap(rng.random((5, 5)), np.ones((5, 5), bool))
        w = sigmoid_weights(z, np.ones((5, 5)), k=0.0)
        assert (w.right[:, :-1] == 0.5).all()
        assert (w.right[:, -1] == 0.0).all()

    def test_weight_monotone_in_jump(self):
        nz = np.ones((3, 4))
        prev = 1.0
        for jump in (0.5, 1.0, 2.0, 4.0):
            z_vals = np.tile([1.0, 1.0, 1.0 + jump, 1.0 + jump], (3, 1))
            w = sigmoid_weights(DepthMap(z_vals, np.ones((3, 4), bool)), nz, k=2.0)
            crossing = w.right[1, 1]
            assert crossing < prev
            prev = crossing


class TestAssembly:
    def test_matches_brute_force(self):
        cam = CameraModel("orthographic", 6, 6)
        for seed in range(3):
            nm, zr, w, mask = random_instance(seed)
            sysm = assemble_system(nm, cam, w, zr, lam=1e-3)
            m_ref, b_ref = brute_force_system(nm, cam, w, zr, 1e-3)
            np.testing.assert_allclose(sysm.matrix.toarray(), m_ref, atol=1e-12)
            np.testing.assert_allclose(sysm.rhs, b_ref, atol=1e-12)

    def test_symmetry(self):
        cam = CameraModel("orthographic", 8, 8)
        for seed in range(3):
            nm, zr, w, _ = random_instance(seed, 8, 8)
            sysm = assemble_system(nm, cam, w, zr, lam=1e-3)
            gap = (sysm.matrix - sysm.matrix.T).tocoo()
            assert np.abs(gap.data).max() < 1e-12 if gap.nnz else True

    def test_index_map_is_a_bijection(self):
        cam = CameraModel("orthographic", 8, 8)
        nm, zr, w, mask = random_instance(1, 8, 8)
        sysm = assemble_system(nm, cam, w, zr, lam=1e-3)
        inside = sysm.index_map[mask]
        assert sorted(inside) == list(range(int(mask.sum())))
        assert (sysm.index_map[~mask] == -1).all()

    def test_zero_weights_reduce_to_proximity(self):
        cam = CameraModel("orthographic", 5, 5)
        mask = np.ones((5, 5), bool)
        nm = flat_normals(5, 5)
        zr = DepthMap(np.linspace(1, 2, 25).reshape(5, 5), mask)
        zero = DirectionalWeights(*(np.zeros((5, 5)) for _ in range(4)))
        sysm = assemble_system(nm, cam, zero, zr, lam=1e-3)
        z = solve_cg(sysm, tol=1e-12)
        np.testing.assert_allclose(z.values, zr.values, atol=1e-9)

    def test_lambda_positive_required(self):
        cam = CameraModel("orthographic", 4, 4)
        nm, zr, w, _ = random_instance(0, 4, 4, holes=False)
        with pytest.raises(DataError):
            assemble_system(nm, cam, w, zr, lam=0.0)

    def test_empty_mask_rejected(self):
        cam = CameraModel("orthographic", 4, 4)
        nm = flat_normals(4, 4, np.zeros((4, 4), bool))
        zr = DepthMap(np.ones((4, 4)), np.zeros((4, 4), bool))
        zero = DirectionalWeights(*(np.zeros((4, 4)) for _ in range(4)))
        with pytest.raises(DataError):
            assemble_system(nm, cam, zero, zr)

    def test_perspective_requires_log_space(self):
        cam = CameraModel("perspective", 4, 4, f=1.0, mu=10.0)
        nm, zr, w, _ = random_instance(1, 4, 4, holes=False)
        with pytest.raises(DataError):
            assemble_system(nm, cam, w, zr)  # zr is linear space


class TestSolveCg:
    def test_identity_system_one_iteration(self):
        n = 10
        sysm = SparseSystem(scipy.sparse.identity(n, format="csr"),
                            np.arange(1.0, n + 1), np.arange(n).reshape(1, n),
                            np.ones((1, n), bool), "linear", np.zeros(n))
        iters = []
        z = solve_cg(sysm, callback=lambda x: iters.append(1))
        assert len(iters) == 1
        np.testing.assert_allclose(z.values[0], np.arange(1.0, n + 1))

    def test_warm_start_at_solution(self):
        n = 6
        rng = np.random.default_rng(2)
        a = rng.normal(size=(n, n))
        spd = a @ a.T + n * np.eye(n)
        x_true = rng.normal(size=n)
        sysm = SparseSystem(scipy.sparse.csr_matrix(spd), spd @ x_true,
                            np.arange(n).reshape(1, n), np.ones((1, n), bool),
                            "linear", x_true.copy())
        iters = []
        z = solve_cg(sysm, callback=lambda x: iters.append(1))
        assert iters == []
        np.testing.assert_allclose(z.values[0], x_true)

    def test_matches_dense_factorization(self):
        cam = CameraModel("orthographic", 8, 8)
        nm, zr, w, mask = random_instance(4, 8, 8)
        sysm = assemble_system(nm, cam, w, zr, lam=1e-3)
        direct = spla.spsolve(sysm.matrix.tocsc(), sysm.rhs)
        z = solve_cg(sysm, tol=1e-12, max_iter=20000)
        rel = np.abs(z.values[mask] - direct).max() / max(np.abs(direct).max(), 1e-12)
        assert rel < 1e-6

    def test_max_iter_reported(self):
        cam = CameraModel("orthographic", 8, 8)
        nm, zr, w, _ = random_instance(5, 8, 8)
        sysm = assemble_system(nm, cam, w, zr, lam=1e-3)
        with pytest.warns(UserWarning, match="max_iter"):
            solve_cg(sysm, tol=1e-14, max_iter=2)

    def test_objective_monotone_descent(self):
        cam = CameraModel("orthographic", 8, 8)
        nm, zr, w, mask = random_instance(6, 8, 8, holes=False)
        sysm = assemble_system(nm, cam, w, zr, lam=1e-3)
        a, b = sysm.matrix, sysm.rhs
        values = []
        solve_cg(sysm, tol=1e-12, max_iter=500,
                 callback=lambda x: values.append(0.5 * x @ (a @ x) - b @ x))
        diffs = np.diff(values)
        assert (diffs <= 1e-12).all()


def step_scene(n=16, jump=0.3, w_cut=True):
    cam = CameraModel("orthographic", n, n)
    grid = normalized_coords(cam)
    u = grid[..., 0]
    mask = np.ones((n, n), bool)
    region = np.arange(n) >= n // 2
    slope = 0.05
    gt = 1.0 + slope * u + jump * region[None, :]
    normals = np.stack([-slope * np.ones((n, n)), np.zeros((n, n)), np.ones((n, n))], -1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    nm = NormalMap(normals, mask)
    omega = np.ones((n, n))
    if w_cut:
        omega[:, n // 2 - 1:n // 2 + 1] = 0.0  # zero across the step
    return cam, nm, DepthMap(gt, mask), AttentionWeightMap(omega, mask)


class TestRefine:
    def test_exact_step_recovery_with_oracle_weights(self):
        cam, nm, gt, omega = step_scene()
        z_r = DepthMap(gt.values + 0.05, gt.mask)  # ground truth plus a constant
        out = refine(nm, cam, z_r, attention=omega, lam=1e-3, tol=1e-12)
        d = out.values - gt.values
        assert np.abs(d - d.mean()).max() < 1e-6

    def test_uniform_weights_smear_the_step(self):
        cam, nm, gt, omega = step_scene()
        ones = AttentionWeightMap(np.ones(gt.shape), gt.mask)
        z_r = DepthMap(gt.values + 0.05, gt.mask)
        sharp = refine(nm, cam, z_r, attention=omega, lam=1e-3, tol=1e-12)
        blurred = refine(nm, cam, z_r, attention=ones, lam=1e-3, tol=1e-12)
        mae_sharp = mae_mm(DepthMap(sharp.values, gt.mask), gt, mu=1.0)
        mae_blur = mae_mm(DepthMap(blurred.values, gt.mask), gt, mu=1.0)
        assert mae_blur > 10 * max(mae_sharp, 1e-9)

    def test_per_segment_offsets_follow_z_r(self):
        # with the step rows cut, the solution reproduces z_R exactly even
        # when its two segments carry different constants
        cam, nm, gt, omega = step_scene()
        shift = np.where(np.arange(16) >= 8, 0.07, -0.03)[None, :]
        z_r = DepthMap(gt.values + shift, gt.mask)
        out = refine(nm, cam, z_r, attention=omega, lam=1e-3, tol=1e-12)
        np.testing.assert_allclose(out.values, z_r.values, atol=1e-6)

    def test_smooth_scene_consistency(self):
        cam, nm, gt, _ = step_scene(jump=0.0, w_cut=False)
        z_r = DepthMap(gt.values.copy(), gt.mask)
        ones = AttentionWeightMap(np.ones(gt.shape), gt.mask)
        out = refine(nm, cam, z_r, attention=ones, lam=1e-3, tol=1e-12)
        base = mae_mm(DepthMap(z_r.values, gt.mask), gt, mu=1.0)
        refined = mae_mm(DepthMap(out.values, gt.mask), gt, mu=1.0)
        assert abs(refined - base) < 1e-4

    def test_large_lambda_returns_z_r(self):
        cam, nm, gt, omega = step_scene()
        rng = np.random.default_rng(0)
        z_r = DepthMap(gt.values + 0.01 * rng.random(gt.shape), gt.mask)
        out = refine(nm, cam, z_r, attention=omega, lam=1e3, tol=1e-12)
        rel = np.abs(out.values - z_r.values).max() / np.abs(z_r.values).max()
        assert rel < 1e-3

    def test_weight_mode_exclusive(self):
        cam, nm, gt, omega = step_scene()
        z_r = DepthMap(gt.values, gt.mask)
        with pytest.raises(DataError):
            refine(nm, cam, z_r)
        with pytest.raises(DataError):
            refine(nm, cam, z_r, attention=omega, sigmoid_k=2.0)

    def test_perspective_roundtrip(self):
        n = 16
        cam = CameraModel("perspective", n, n, f=1.5, mu=100.0)
        grid = normalized_coords(cam)
        z_lin = 1.0 + 0.05 * grid[..., 0]
        mask = np.ones((n, n), bool)
        from sfgrad.geometry import normals_from_depth
        nm = normals_from_depth(DepthMap(z_lin, mask), cam)
        z_r = DepthMap(z_lin, mask)  # linear in, converted to log internally
        out = refine(nm, cam, z_r, sigmoid_k=2.0, lam=1e-3)
        assert out.space == "linear"
        assert np.isfinite(out.values[out.mask]).all()


def test_dump_system_roundtrip(tmp_path):
    cam = CameraModel("orthographic", 6, 6)
    nm, zr, w, _ = random_instance(7)
    sysm = assemble_system(nm, cam, w, zr, lam=1e-3)
    mpath = tmp_path / "system.mtx"
    rpath = tmp_path / "rhs.mtx"
    dump_system(sysm, mpath, rpath)
    m2 = scipy.io.mmread(mpath).tocsr()
    r2 = np.asarray(scipy.io.mmread(rpath)).ravel()
    assert np.abs((m2 - sysm.matrix).toarray()).max() < 1e-15
    np.testing.assert_allclose(r2, sysm.rhs)
