"""Weighted least-squares refinement across a depth discontinuity.

A disk-shaped object holds a tear: the depth jumps across a masked-out line
whose height tapers to zero inside the object.  The cosine-transform solver
must work on the zero-filled full rectangle and smears the tear globally.
The refinement solves only the masked domain with per-direction weights and
rebuilds the surface; the script compares millimeter errors and writes error
maps for both.
"""

import pathlib

import numpy as np

import sfgrad
from sfgrad.evaluate import error_map
from sfgrad.fileio import write_png

OUT = pathlib.Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

H = W = 128
MU = 500.0
JUMP, TILT = 0.25, 0.25

cam = sfgrad.CameraModel("orthographic", W, H, mu=MU)
grid = sfgrad.normalized_coords(cam)
u, v = grid[..., 0], grid[..., 1]

# tapered tear: open for v < -0.05, closed by v = 0.25
t = np.clip((0.25 - v) / 0.3, 0.0, 1.0)
height = JUMP * (3 * t ** 2 - 2 * t ** 3)
dheight = JUMP * (6 * t - 6 * t ** 2) * (-1 / 0.3) * ((v < 0.25) & (v > -0.05))
right = u > 0.1
gt_vals = 1.0 + TILT * u - 0.6 * TILT * v + height * right
zu = np.full_like(u, TILT)
zv = -0.6 * TILT + dheight * right

mask = (u ** 2 + v ** 2) < 0.85 ** 2
edge_col = np.searchsorted(grid[0, :, 0], 0.1)
mask[height[:, 0] > 1e-6, edge_col - 1:edge_col + 1] = False

normals = np.stack([-zu, -zv, np.ones_like(u)], -1)
normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
nm = sfgrad.NormalMap(np.where(mask[..., None], normals, 0), mask)
gt = sfgrad.DepthMap(np.where(mask, gt_vals, 0), mask)

# baseline: gradient multiplied by the mask, full-grid cosine solve
g = sfgrad.gradients_from_normals(nm, cam)
g_fill = sfgrad.GradientField(np.where(g.mask, g.p, 0), np.where(g.mask, g.q, 0),
                              np.ones((H, W), bool), g.space)
delta = cam.cell_size
z_dct = sfgrad.integrate_dct(g_fill, du=delta, dv=delta)
baseline = sfgrad.DepthMap(np.where(mask, z_dct.values, 0), mask)
mae_dct = sfgrad.mae_mm(baseline, gt, mu=MU)

# refinement: bilateral sigmoid weights cut the constraints crossing the
# tear; everything else re-integrates on the masked domain
refined = sfgrad.refine(nm, cam, baseline, sigmoid_k=2.0, lam=1e-3)
mae_ref = sfgrad.mae_mm(refined, gt, mu=MU)

print(f"tear scene {H}x{W}, jump {JUMP * MU:.0f} mm, masked wall")
print(f"cosine-transform baseline: MAE {mae_dct:6.2f} mm")
print(f"weighted refinement:       MAE {mae_ref:6.2f} mm "
      f"({100 * (1 - mae_ref / mae_dct):.0f}% lower)")

write_png(OUT / "tear_error_dct.png", error_map(baseline, gt, mu=MU, ceiling_mm=20.0))
write_png(OUT / "tear_error_refined.png", error_map(refined, gt, mu=MU, ceiling_mm=20.0))
print(f"error maps written to {OUT}/tear_error_*.png")

# oracle-weight variant: zeroing the attention across a step recovers it
# exactly when the Stage I estimate carries the jump
n16 = 16
cam16 = sfgrad.CameraModel("orthographic", n16, n16)
u16 = sfgrad.normalized_coords(cam16)[..., 0]
mask16 = np.ones((n16, n16), bool)
gt16 = sfgrad.DepthMap(1.0 + 0.05 * u16 + 0.3 * (np.arange(n16) >= 8)[None, :], mask16)
n_flat = np.stack([np.full((n16, n16), -0.05), np.zeros((n16, n16)),
                   np.ones((n16, n16))], -1)
n_flat /= np.linalg.norm(n_flat, axis=-1, keepdims=True)
omega = np.ones((n16, n16))
omega[:, 7:9] = 0.0
out = sfgrad.refine(sfgrad.NormalMap(n_flat, mask16), cam16,
                    sfgrad.DepthMap(gt16.values + 0.02, mask16),
                    attention=sfgrad.AttentionWeightMap(omega, mask16),
                    lam=1e-3, tol=1e-12)
d = out.values - gt16.values
print(f"\noracle-weight step recovery error: {np.abs(d - d.mean()).max():.2e}")
