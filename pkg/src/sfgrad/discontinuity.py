"""Stage II: one-pass weighted least-squares refinement of a depth estimate.

The convex objective couples four directional gradient constraints, each
gated by the smoothness weight of the neighbor it reaches toward, with a
proximity pull toward the Stage I depth:

    sum_dir (w_dir / 2) * (n_z * D_dir z + n_dir)^2 + lambda * (z - z_R)^2

The proximity term stays outside the weighted squares: a zero weight removes
a gradient constraint without unanchoring the pixel, so the normal equations
remain positive definite on arbitrary masks and across detected
discontinuities, and unresolvable gradient residuals cannot leak into the
anchor.  Perspective inputs are refined in log depth with n_z replaced by
the perspective denominator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse

from .errors import DataError, NumericalError
from .geometry import (
    AttentionWeightMap,
    CameraModel,
    DepthMap,
    NormalMap,
    OneSidedDiffs,
    one_sided_diffs,
    perspective_denominator,
)

LAMBDA_DEFAULT = 1e-3
SIGMOID_K_DEFAULT = 2.0
CG_TOL = 1e-9
CG_MAX_ITER = 5000

# direction name -> (row shift, column shift) of the neighbor it uses
_DIRECTIONS = {
    "right": (0, 1),
    "left": (0, -1),
    "top": (-1, 0),
    "bottom": (1, 0),
}


@dataclass
class DirectionalWeights:
    """Per-direction weights in [0, 1]; zero where the neighbor is invalid."""

    right: np.ndarray
    left: np.ndarray
    top: np.ndarray
    bottom: np.ndarray

    def __post_init__(self):
        shape = self.right.shape
        for name in _DIRECTIONS:
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.shape != shape:
                raise DataError("directional weights must share one shape")
            if w.size and (w.min() < -1e-12 or w.max() > 1 + 1e-12):
                raise DataError("directional weights must lie in [0, 1]")
            setattr(self, name, np.clip(w, 0.0, 1.0))


@dataclass
class SparseSystem:
    """Normal equations A^T W A z = A^T W b over the masked pixels.

    ``index_map`` records the flattening order (-1 outside the mask);
    ``warm_start`` is the flattened Stage I depth used to seed the solver.
    """

    matrix: scipy.sparse.csr_matrix
    rhs: np.ndarray
    index_map: np.ndarray
    mask: np.ndarray
    space: str
    warm_start: np.ndarray


def _neighbor_shift(arr: np.ndarray, di: int, dj: int, fill=0.0) -> np.ndarray:
    out = np.full_like(np.asarray(arr), fill)
    h, w = arr.shape[:2]
    src_i = slice(max(di, 0), h + min(di, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = arr[src_i, src_j]
    return out


def directional_weights_from_attention(omega: AttentionWeightMap) -> DirectionalWeights:
    """Weights at adjacent pixels: each direction reads the neighbor's omega."""
    w = np.where(omega.mask, omega.weights, 0.0)
    out = {}
    for name, (di, dj) in _DIRECTIONS.items():
        neighbor_ok = omega.mask & _neighbor_shift(omega.mask, di, dj, fill=False)
        out[name] = np.where(neighbor_ok, _neighbor_shift(w, di, dj), 0.0)
    return DirectionalWeights(**out)


def sigmoid_weights(z: DepthMap, nz: np.ndarray, k: float = SIGMOID_K_DEFAULT) -> DirectionalWeights:
    """Bilateral-style weights from one-sided depth jumps.

    w_dir = 1 / (1 + exp(k * (jump_dir^2 - jump_opposite^2))); the direction
    crossing a jump is suppressed, its opposite strengthened, and the two
    always sum to 1.  Invalid neighbors get weight 0.
    """
    d = one_sided_diffs(z, nz)

    def logistic(a, b):
        return 1.0 / (1.0 + np.exp(np.clip(k * (a ** 2 - b ** 2), -500, 500)))

    return DirectionalWeights(
        right=np.where(d.valid_du_pos, logistic(d.du_pos, d.du_neg), 0.0),
        left=np.where(d.valid_du_neg, logistic(d.du_neg, d.du_pos), 0.0),
        bottom=np.where(d.valid_dv_pos, logistic(d.dv_pos, d.dv_neg), 0.0),
        top=np.where(d.valid_dv_neg, logistic(d.dv_neg, d.dv_pos), 0.0),
    )


def assemble_system(n: NormalMap, cam: CameraModel, w: DirectionalWeights,
                    z_r: DepthMap, lam: float = LAMBDA_DEFAULT) -> SparseSystem:
    """Build the weighted normal equations for Stage II.

    z_r must be in log space for perspective cameras and linear space for
    orthographic ones.  Derivatives are scaled by the normalized-coordinate
    cell size so lambda keeps one meaning across resolutions.
    """
    if lam <= 0:
        raise DataError("lambda must be positive")
    expected_space = "log" if cam.projection == "perspective" else "linear"
    if z_r.space != expected_space:
        raise DataError(f"{cam.projection} refinement expects {expected_space}-space depth")
    mask = n.mask & z_r.mask
    n_px = int(mask.sum())
    if n_px == 0:
        raise DataError("empty mask")

    index_map = -np.ones(mask.shape, dtype=np.int64)
    index_map[mask] = np.arange(n_px)
    delta = cam.cell_size
    if cam.projection == "perspective":
        nz = perspective_denominator(n, cam)
    else:
        nz = n.normals[..., 2]
    n1 = n.normals[..., 0]
    n2 = n.normals[..., 1]
    zr_flat = z_r.values[mask]

    ata = scipy.sparse.csr_matrix((n_px, n_px))
    atb = np.zeros(n_px)
    for name, (di, dj) in _DIRECTIONS.items():
        n_dir = (n1 if dj != 0 else n2)[mask]
        weight = getattr(w, name)
        neighbor_ok = mask & _neighbor_shift(mask, di, dj, fill=False)
        w_half = 0.5 * np.where(neighbor_ok, weight, 0.0)[mask]
        center = index_map[mask]
        nb_index = _neighbor_shift(index_map, di, dj, fill=-1)[mask]
        nb_index = np.where(nb_index < 0, center, nb_index)  # dead entries, weight 0

        sign = 1.0 if (di + dj) > 0 else -1.0  # forward vs backward difference
        coeff = sign * nz[mask] / delta
        rows = np.concatenate([center, center])
        cols = np.concatenate([center, nb_index])
        vals = np.concatenate([-coeff, np.where(nb_index == center, 0.0, coeff)])
        a_dir = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n_px, n_px))
        ata = ata + a_dir.T @ a_dir.multiply(w_half[:, None])
        atb = atb + a_dir.T @ (w_half * -n_dir)
    ata = (ata + lam * scipy.sparse.identity(n_px, format="csr")).tocsr()
    atb = atb + lam * zr_flat
    return SparseSystem(ata, atb, index_map, mask.copy(), z_r.space, zr_flat.copy())


def solve_cg(system: SparseSystem, tol: float = CG_TOL, max_iter: int = CG_MAX_ITER,
             x0: np.ndarray | None = None, callback=None) -> DepthMap:
    """Conjugate gradients on the assembled normal equations.

    Starts from the Stage I depth; non-convergence and residual stagnation
    are reported through warnings rather than silently accepted.
    """
    a = system.matrix
    b = system.rhs
    x = system.warm_start.copy() if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        b_norm = 1.0
    r = b - a @ x
    p = r.copy()
    rs = float(r @ r)
    best = np.sqrt(rs)
    since_best = 0
    iterations = 0
    while np.sqrt(rs) / b_norm > tol and iterations < max_iter:
        ap = a @ p
        denom = float(p @ ap)
        if denom <= 0:
            raise NumericalError("system lost positive definiteness")
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        iterations += 1
        if callback is not None:
            callback(x.copy())
        res = np.sqrt(rs)
        if res < best / 10.0:
            best = res
            since_best = 0
        else:
            since_best += 1
            if since_best >= 500:
                warnings.warn(f"residual stagnated near {res / b_norm:.3e} "
                              f"after {iterations} iterations", stacklevel=2)
                since_best = 0
    if iterations >= max_iter and np.sqrt(rs) / b_norm > tol:
        warnings.warn(f"conjugate gradients hit max_iter={max_iter} with relative "
                      f"residual {np.sqrt(rs) / b_norm:.3e}", stacklevel=2)
    out = np.zeros(system.mask.shape, dtype=np.float64)
    out[system.mask] = x
    return DepthMap(out, system.mask.copy(), space=system.space, relative=True)


def refine(n: NormalMap, cam: CameraModel, z_r: DepthMap,
           attention: AttentionWeightMap | None = None,
           sigmoid_k: float | None = None,
           lam: float = LAMBDA_DEFAULT, tol: float = CG_TOL,
           max_iter: int = CG_MAX_ITER) -> DepthMap:
    """End-to-end Stage II: weights, assembly, conjugate gradients.

    Exactly one weighting mode applies: an attention map, or sigmoid weights
    computed from z_r itself (pass ``sigmoid_k``; 2.0 is the usual value).
    Returns linear-space relative depth.
    """
    if (attention is None) == (sigmoid_k is None):
        raise DataError("choose exactly one of attention weights or sigmoid_k")
    expected_space = "log" if cam.projection == "perspective" else "linear"
    if z_r.space != expected_space:
        z_r = z_r.to_log() if expected_space == "log" else z_r.to_linear()
    if attention is not None:
        w = directional_weights_from_attention(attention)
    else:
        nz = perspective_denominator(n, cam) if cam.projection == "perspective" \
            else n.normals[..., 2]
        # the logistic is unit sensitive: feed it millimeter depths (log depth
        # jumps are scale invariant, so only the linear case needs mu)
        scale = cam.mu if (z_r.space == "linear" and z_r.relative) else 1.0
        z_w = DepthMap(z_r.values * scale, z_r.mask, space=z_r.space,
                       relative=False) if scale != 1.0 else z_r
        w = sigmoid_weights(z_w, np.where(z_r.mask, nz, 0.0), k=sigmoid_k)
    system = assemble_system(n, cam, w, z_r, lam=lam)
    solution = solve_cg(system, tol=tol, max_iter=max_iter)
    return solution.to_linear() if solution.space == "log" else solution


def dump_system(system: SparseSystem, matrix_path, rhs_path=None):
    """Write the assembled system in Matrix Market coordinate format."""
    scipy.io.mmwrite(matrix_path, scipy.sparse.coo_matrix(system.matrix))
    if rhs_path is not None:
        scipy.io.mmwrite(rhs_path, system.rhs[:, None])


def objective_value(n: NormalMap, cam: CameraModel, w: DirectionalWeights,
                    z: DepthMap, z_r: DepthMap, lam: float = LAMBDA_DEFAULT) -> float:
    """Quadratic objective the normal equations minimize, evaluated directly."""
    system = assemble_system(n, cam, w, z_r, lam=lam)
    x = z.values[system.mask]
    a, b = system.matrix, system.rhs
    return float(0.5 * x @ (a @ x) - b @ x)
