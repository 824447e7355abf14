"""Camera model, normalized image coordinates, and conversions between
normals, gradients, depths and point clouds.

Conventions used throughout the package:

* Arrays are row-major H x W.  The column index j corresponds to the
  horizontal image axis u, the row index i to the vertical axis v
  (v grows downward with the row index).
* Normalized coordinates: pixel centers of the longer image axis span
  [-1, 1]; the shorter axis spans a proportional sub-interval so that
  pixels stay square.  The cell size is ``2 / (max(H, W) - 1)``.
* Depth is distance from the camera, positive into the scene.  Solver-facing
  depths are relative (z / mu); the main distance mu is reapplied only when
  exporting or computing millimeter errors.
* Normals are unit vectors with n3 > 0 (facing the camera).  A plane
  z = a*u + b*v has normal proportional to (-a, -b, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SINGULAR_DENOM = 1e-8
DEGENERATE_CROSS = 1e-12


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with normalized intrinsics.

    Parameters
    ----------
    projection : {"orthographic", "perspective"}
    f : focal length in normalized image units (perspective only).
    mu : main distance in millimeters; scale that restores absolute depth.
    width, height : image size in pixels.
    """

    projection: str
    width: int
    height: int
    f: float | None = None
    mu: float = 1.0

    def __post_init__(self):
        if self.projection not in ("orthographic", "perspective"):
            raise DataError(f"unknown projection {self.projection!r}")
        if self.width < 2 or self.height < 2:
            raise DataError("image must be at least 2x2 pixels")
        if self.projection == "perspective":
            if self.f is None or self.f <= 0:
                raise DataError("perspective projection requires f > 0")
            if self.mu <= 0:
                raise DataError("perspective projection requires mu > 0")

    @property
    def cell_size(self) -> float:
        """Normalized-coordinate spacing between adjacent pixel centers."""
        return 2.0 / (max(self.width, self.height) - 1)

    def at_resolution(self, height: int, width: int) -> "CameraModel":
        """Same camera viewed at a different pixel resolution.

        The normalized focal length and mu are resolution independent.
        """
        return CameraModel(self.projection, width, height, f=self.f, mu=self.mu)


@dataclass
class NormalMap:
    """Per-pixel unit outward normals with a validity mask."""

    normals: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.ndim != 3 or self.normals.shape[2] != 3:
            raise DataError("normals must have shape (H, W, 3)")
        if self.mask.shape != self.normals.shape[:2]:
            raise DataError("mask shape does not match normals")
        if self.mask.any():
            n = self.normals[self.mask]
            if not np.isfinite(n).all():
                raise DataError("non-finite normals inside the mask")
            err = np.abs(np.linalg.norm(n, axis=-1) - 1.0)
            if err.max() > 1e-6:
                raise DataError("normals are not unit length (max |err| = %g)" % err.max())
            if (n[:, 2] <= 0).any():
                raise DataError("masked-in normals must have n3 > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class GradientField:
    """Target gradients (p, q) of (log-)depth; right-hand side of grad z = g."""

    p: np.ndarray
    q: np.ndarray
    mask: np.ndarray
    space: str = "linear"  # "log" under perspective projection

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.p.shape != self.q.shape or self.p.shape != self.mask.shape:
            raise DataError("p, q and mask must share one (H, W) shape")
        if self.space not in ("linear", "log"):
            raise DataError(f"unknown gradient space {self.space!r}")
        if self.mask.any():
            if not (np.isfinite(self.p[self.mask]).all() and np.isfinite(self.q[self.mask]).all()):
                raise DataError("non-finite gradients inside the mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class DepthMap:
    """Per-pixel depth in linear or log space.

    ``relative`` marks values expressed as z / mu.  Linear-space depths are
    positive for physical surfaces, but gauge-free solver outputs (zero-mean)
    may dip below zero; positivity is checked where it is actually required
    (log conversion, perspective back-projection).
    """

    values: np.ndarray
    mask: np.ndarray
    space: str = "linear"
    relative: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise DataError("values and mask must share one (H, W) shape")
        if self.space not in ("linear", "log"):
            raise DataError(f"unknown depth space {self.space!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def to_log(self) -> "DepthMap":
        if self.space == "log":
            return self
        vals = self.values[self.mask]
        if vals.size and vals.min() <= 0:
            raise DataError("cannot take log of non-positive depth")
        out = np.zeros_like(self.values)
        out[self.mask] = np.log(self.values[self.mask])
        return DepthMap(out, self.mask, space="log", relative=self.relative)

    def to_linear(self) -> "DepthMap":
        if self.space == "linear":
            return self
        out = np.zeros_like(self.values)
        out[self.mask] = np.exp(self.values[self.mask])
        return DepthMap(out, self.mask, space="linear", relative=self.relative)


@dataclass
class PointCloud:
    """Back-projected 3D points on the pixel grid."""

    points: np.ndarray  # (H, W, 3)
    mask: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise DataError("points must have shape (H, W, 3)")
        if self.mask.shape != self.points.shape[:2]:
            raise DataError("mask shape does not match points")
        if self.mask.any() and not np.isfinite(self.points[self.mask]).all():
            raise DataError("non-finite points inside the mask")


@dataclass
class AttentionWeightMap:
    """Per-pixel smoothness confidence in [0, 1]; low at discontinuities."""

    weights: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.weights.shape != self.mask.shape:
            raise DataError("weights and mask must share one (H, W) shape")
        if self.mask.any():
            w = self.weights[self.mask]
            if w.min() < -1e-12 or w.max() > 1 + 1e-12:
                raise DataError("attention weights must lie in [0, 1]")


@dataclass
class OneSidedDiffs:
    """Depth jumps toward the four pixel neighbors, scaled by n_z.

    ``du_pos[i, j] = n_z * (z[i, j] - z[i, j+1])`` and the three analogues;
    entries whose neighbor is outside the grid or masked out are zero with
    the matching validity flag cleared.
    """

    du_pos: np.ndarray
    du_neg: np.ndarray
    dv_pos: np.ndarray
    dv_neg: np.ndarray
    valid_du_pos: np.ndarray = field(repr=False, default=None)
    valid_du_neg: np.ndarray = field(repr=False, default=None)
    valid_dv_pos: np.ndarray = field(repr=False, default=None)
    valid_dv_neg: np.ndarray = field(repr=False, default=None)


def normalized_coords(cam: CameraModel) -> np.ndarray:
    """Pixel-center coordinate grid, shape (H, W, 2) with (u, v) per pixel.

    The longer axis spans exactly [-1, 1]; the shorter one is centered and
    uses the same spacing, so pixels are square.
    """
    h, w = cam.height, cam.width
    if h < 2 or w < 2:
        raise DataError("degenerate image size")
    delta = cam.cell_size
    u = (np.arange(w) - (w - 1) / 2.0) * delta
    v = (np.arange(h) - (h - 1) / 2.0) * delta
    grid = np.empty((h, w, 2), dtype=np.float64)
    grid[..., 0] = u[None, :]
    grid[..., 1] = v[:, None]
    return grid


def gradients_from_normals(n: NormalMap, cam: CameraModel) -> GradientField:
    """Convert a normal map into the target gradient field.

    Orthographic: p = -n1/n3, q = -n2/n3 acting on linear depth.
    Perspective: the denominator becomes nt3 = u*n1 + v*n2 + f*n3 and the
    gradients act on log depth.  Pixels with |denominator| < 1e-8 are
    masked out instead of producing unbounded gradients.
    """
    n1, n2, n3 = n.normals[..., 0], n.normals[..., 1], n.normals[..., 2]
    if cam.projection == "orthographic":
        denom = n3
        space = "linear"
    else:
        coords = normalized_coords(cam)
        denom = coords[..., 0] * n1 + coords[..., 1] * n2 + cam.f * n3
        space = "log"
    ok = n.mask & (np.abs(denom) >= SINGULAR_DENOM)
    safe = np.where(ok, denom, 1.0)
    p = np.where(ok, -n1 / safe, 0.0)
    q = np.where(ok, -n2 / safe, 0.0)
    return GradientField(p, q, ok, space=space)


def _shift(a: np.ndarray, di: int, dj: int, fill=0.0) -> np.ndarray:
    """Array shifted so out[i, j] = a[i + di, j + dj], padded with fill."""
    out = np.full_like(a, fill)
    h, w = a.shape[:2]
    src_i = slice(max(di, 0), h + min(di, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = a[src_i, src_j]
    return out


def masked_diff_coefficients(mask: np.ndarray, axis: int, delta: float):
    """Stencil coefficients for a mask-aware central difference.

    Returns (c_plus, c_minus, c_self, isolated): the derivative along
    ``axis`` is ``c_plus * shift(z, +1) + c_minus * shift(z, -1) + c_self * z``.
    Central differences where both neighbors are valid, one-sided at mask
    boundaries, zero (and flagged) where no neighbor exists.
    """
    di, dj = (1, 0) if axis == 0 else (0, 1)
    has_plus = mask & _shift(mask, di, dj, fill=False)
    has_minus = mask & _shift(mask, -di, -dj, fill=False)
    both = has_plus & has_minus
    only_plus = has_plus & ~has_minus
    only_minus = has_minus & ~has_plus
    c_plus = np.where(both, 0.5 / delta, np.where(only_plus, 1.0 / delta, 0.0))
    c_minus = np.where(both, -0.5 / delta, np.where(only_minus, -1.0 / delta, 0.0))
    c_self = np.where(only_plus, -1.0 / delta, np.where(only_minus, 1.0 / delta, 0.0))
    isolated = mask & ~has_plus & ~has_minus
    return c_plus, c_minus, c_self, isolated


def central_diff_gradient(z: DepthMap, cam: CameraModel, return_flags: bool = False):
    """Numerical gradient of a depth map over the normalized grid.

    One-sided differences take over at mask boundaries; isolated pixels get
    zero in the affected direction and are flagged when requested.
    """
    delta = cam.cell_size
    vals = np.where(z.mask, z.values, 0.0)
    cu_p, cu_m, cu_s, iso_u = masked_diff_coefficients(z.mask, axis=1, delta=delta)
    cv_p, cv_m, cv_s, iso_v = masked_diff_coefficients(z.mask, axis=0, delta=delta)
    p = cu_p * _shift(vals, 0, 1) + cu_m * _shift(vals, 0, -1) + cu_s * vals
    q = cv_p * _shift(vals, 1, 0) + cv_m * _shift(vals, -1, 0) + cv_s * vals
    g = GradientField(p, q, z.mask.copy(), space=z.space)
    if return_flags:
        return g, (iso_u | iso_v)
    return g


def depth_to_points(z: DepthMap, cam: CameraModel) -> PointCloud:
    """Back-project a linear-space depth map to 3D points.

    Orthographic: (u, v, z).  Perspective: z * K^-1 (u, v, 1)^T with the
    normalized intrinsics K = diag(f, f, 1).
    """
    if z.space != "linear":
        raise DataError("depth_to_points requires linear-space depth")
    coords = normalized_coords(cam)
    pts = np.zeros(z.values.shape + (3,), dtype=np.float64)
    vals = np.where(z.mask, z.values, 0.0)
    if cam.projection == "orthographic":
        pts[..., 0] = coords[..., 0]
        pts[..., 1] = coords[..., 1]
        pts[..., 2] = vals
    else:
        pts[..., 0] = vals * coords[..., 0] / cam.f
        pts[..., 1] = vals * coords[..., 1] / cam.f
        pts[..., 2] = vals
    pts[~z.mask] = 0.0
    return PointCloud(pts, z.mask.copy())


def normals_from_depth(z: DepthMap, cam: CameraModel) -> NormalMap:
    """Normal map of a linear-space depth map.

    Normals are the normalized cross product of the point-cloud partial
    derivatives (central differences, one-sided at mask boundaries), with
    the sign chosen so n3 > 0.  Pixels with a degenerate cross product
    are masked out.
    """
    pc = depth_to_points(z, cam)
    delta = cam.cell_size
    cu_p, cu_m, cu_s, _ = masked_diff_coefficients(z.mask, axis=1, delta=delta)
    cv_p, cv_m, cv_s, _ = masked_diff_coefficients(z.mask, axis=0, delta=delta)
    du = np.empty_like(pc.points)
    dv = np.empty_like(pc.points)
    for c in range(3):
        comp = pc.points[..., c]
        du[..., c] = cu_p * _shift(comp, 0, 1) + cu_m * _shift(comp, 0, -1) + cu_s * comp
        dv[..., c] = cv_p * _shift(comp, 1, 0) + cv_m * _shift(comp, -1, 0) + cv_s * comp
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok = z.mask & (norm >= DEGENERATE_CROSS)
    n = np.where(ok[..., None], n / np.where(ok, norm, 1.0)[..., None], 0.0)
    flip = ok & (n[..., 2] < 0)
    n[flip] = -n[flip]
    ok = ok & (np.abs(n[..., 2]) >= DEGENERATE_CROSS)
    n[~ok] = 0.0
    return NormalMap(n, ok)


def one_sided_diffs(z: DepthMap, nz: np.ndarray) -> OneSidedDiffs:
    """Depth differences toward each of the four neighbors, scaled by nz.

    Jumps whose neighbor falls outside the mask are set to zero and marked
    invalid in the returned flags.
    """
    nz = np.asarray(nz, dtype=np.float64)
    if nz.shape != z.values.shape:
        raise DataError("nz shape does not match depth")
    vals = np.where(z.mask, z.values, 0.0)
    out = {}
    valid = {}
    for name, (di, dj) in (("du_pos", (0, 1)), ("du_neg", (0, -1)),
                           ("dv_pos", (1, 0)), ("dv_neg", (-1, 0))):
        ok = z.mask & _shift(z.mask, di, dj, fill=False)
        out[name] = np.where(ok, nz * (vals - _shift(vals, di, dj)), 0.0)
        valid[name] = ok
    return OneSidedDiffs(
        out["du_pos"], out["du_neg"], out["dv_pos"], out["dv_neg"],
        valid_du_pos=valid["du_pos"], valid_du_neg=valid["du_neg"],
        valid_dv_pos=valid["dv_pos"], valid_dv_neg=valid["dv_neg"],
    )


def perspective_denominator(n: NormalMap, cam: CameraModel) -> np.ndarray:
    """nt3 = u*n1 + v*n2 + f*n3, the perspective gradient denominator."""
    coords = normalized_coords(cam)
    return (coords[..., 0] * n.normals[..., 0]
            + coords[..., 1] * n.normals[..., 1]
            + cam.f * n.normals[..., 2])
