"""Classical smooth-surface integrators: cosine-transform and Fourier
integrability-enforcing solvers plus a dense least-squares oracle.

All three minimize a quadratic mismatch between the discrete gradient of z
and the target field g.  The cosine solver and the dense oracle share the
same forward-difference stencil, so on full rectangular masks they solve the
identical least-squares problem (up to the constant-offset gauge), which the
test suite exploits.  Outputs are zero-mean over the masked domain.

Cell sizes default to 1 (pixel units); pass the camera cell size to work in
normalized coordinates.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.fft
import scipy.ndimage
import scipy.sparse
import scipy.sparse.linalg

from .errors import DataError
from .geometry import DepthMap, GradientField

DENSE_PIXEL_LIMIT = 4096

# 4-connectivity for mask component analysis
_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def forward_diff_gradient(values: np.ndarray, mask: np.ndarray,
                          du: float = 1.0, dv: float = 1.0,
                          space: str = "linear") -> GradientField:
    """Gradient field of a depth array under the solvers' own stencil.

    p[i, j] targets the edge (i, j) -> (i, j+1), q[i, j] the edge
    (i, j) -> (i+1, j); entries without a valid edge are zero.  Fields
    generated this way are recovered exactly by the least-squares solvers.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    p = np.zeros_like(values)
    q = np.zeros_like(values)
    eu = mask[:, :-1] & mask[:, 1:]
    ev = mask[:-1, :] & mask[1:, :]
    p[:, :-1][eu] = (values[:, 1:] - values[:, :-1])[eu] / du
    q[:-1, :][ev] = (values[1:, :] - values[:-1, :])[ev] / dv
    return GradientField(p, q, mask, space=space)


def _require_full_mask(g: GradientField, solver: str):
    if not g.mask.all():
        raise DataError(f"{solver} requires a full rectangular mask; "
                        "use the dense solver or the weighted refinement for holes")


def integrate_dct(g: GradientField, du: float = 1.0, dv: float = 1.0) -> DepthMap:
    """Poisson solve of div(grad z) = div(g) under natural boundary conditions.

    The forward-difference normal equations are diagonalized exactly by the
    type-II cosine transform, so fields produced by ``forward_diff_gradient``
    are reproduced to machine precision.
    """
    _require_full_mask(g, "integrate_dct")
    h, w = g.shape
    if h < 4 or w < 4:
        raise DataError("integrate_dct requires a grid of at least 4x4")
    # adjoint of the forward-difference operators applied to the edge values
    rhs = np.zeros((h, w), dtype=np.float64)
    p, q = g.p, g.q
    rhs[:, 0] -= p[:, 0] / du
    rhs[:, 1:-1] += (p[:, :-2] - p[:, 1:-1]) / du
    rhs[:, -1] += p[:, -2] / du
    rhs[0, :] -= q[0, :] / dv
    rhs[1:-1, :] += (q[:-2, :] - q[1:-1, :]) / dv
    rhs[-1, :] += q[-2, :] / dv

    rhs_hat = scipy.fft.dctn(rhs, type=2, norm="ortho")
    ki = np.arange(h)
    kj = np.arange(w)
    lam = ((2.0 - 2.0 * np.cos(np.pi * kj / w))[None, :] / du ** 2
           + (2.0 - 2.0 * np.cos(np.pi * ki / h))[:, None] / dv ** 2)
    lam[0, 0] = 1.0
    z_hat = rhs_hat / lam
    z_hat[0, 0] = 0.0
    z = scipy.fft.idctn(z_hat, type=2, norm="ortho")
    z -= z.mean()
    return DepthMap(z, g.mask.copy(), space=g.space)


def spectral_derivative(values: np.ndarray, du: float = 1.0, dv: float = 1.0):
    """(p, q) of a periodic surface via the Fourier derivative theorem."""
    h, w = values.shape
    wu = 2.0 * np.pi * scipy.fft.fftfreq(w, d=du)[None, :]
    wv = 2.0 * np.pi * scipy.fft.fftfreq(h, d=dv)[:, None]
    z_hat = scipy.fft.fft2(values)
    p = np.real(scipy.fft.ifft2(1j * wu * z_hat))
    q = np.real(scipy.fft.ifft2(1j * wv * z_hat))
    return p, q


def integrate_fft(g: GradientField, du: float = 1.0, dv: float = 1.0) -> DepthMap:
    """Fourier integrability-enforcing projection under periodic boundaries.

    Least-squares closest surface whose spectral gradient matches g; pure
    curl fields project to zero.
    """
    _require_full_mask(g, "integrate_fft")
    h, w = g.shape
    wu = 2.0 * np.pi * scipy.fft.fftfreq(w, d=du)[None, :]
    wv = 2.0 * np.pi * scipy.fft.fftfreq(h, d=dv)[:, None]
    p_hat = scipy.fft.fft2(g.p)
    q_hat = scipy.fft.fft2(g.q)
    denom = wu ** 2 + wv ** 2
    denom[0, 0] = 1.0
    z_hat = (-1j * wu * p_hat - 1j * wv * q_hat) / denom
    z_hat[0, 0] = 0.0
    z = np.real(scipy.fft.ifft2(z_hat))
    z -= z.mean()
    return DepthMap(z, g.mask.copy(), space=g.space)


def mask_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected components of a boolean mask."""
    labels, count = scipy.ndimage.label(mask, structure=_CONN4)
    return labels, count


def integrate_dense_lsq(g: GradientField, mask: np.ndarray | None = None,
                        du: float = 1.0, dv: float = 1.0) -> DepthMap:
    """Direct least-squares integration over an arbitrary mask.

    Minimizes the forward-difference mismatch to g over all masked-in
    pixels; each connected component is gauge-fixed to zero mean.  Intended
    as a small-grid oracle, hence the pixel-count cap.
    """
    mask = g.mask if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != g.shape:
        raise DataError("mask shape does not match gradient field")
    n_px = int(mask.sum())
    if n_px == 0:
        raise DataError("empty mask")
    if n_px > DENSE_PIXEL_LIMIT:
        raise DataError(f"dense solver capped at {DENSE_PIXEL_LIMIT} pixels, got {n_px}")

    idx = -np.ones(mask.shape, dtype=np.int64)
    idx[mask] = np.arange(n_px)

    rows, cols, vals, rhs = [], [], [], []

    def add_edges(m_from, m_to, target, step):
        pairs = np.nonzero(m_from & m_to[0])
        for i, j in zip(*pairs):
            r = len(rhs)
            rows.extend([r, r])
            cols.extend([idx[i, j], idx[i + m_to[1], j + m_to[2]]])
            vals.extend([-1.0 / step, 1.0 / step])
            rhs.append(target[i, j])

    add_edges(mask[:, :-1], (mask[:, 1:], 0, 1), g.p[:, :-1], du)
    add_edges(mask[:-1, :], (mask[1:, :], 1, 0), g.q[:-1, :], dv)

    a = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(len(rhs), n_px))
    b = np.asarray(rhs)
    ata = (a.T @ a).tocsr()
    atb = a.T @ b

    labels, n_comp = mask_components(mask)
    if n_comp > 1:
        warnings.warn(f"mask has {n_comp} disconnected components; "
                      "each is gauge-fixed independently", stacklevel=2)
    # mean-zero gauge per component via an exact null-space penalty
    penalty = scipy.sparse.lil_matrix((n_px, n_px))
    comp_of_px = labels[mask]
    for c in range(1, n_comp + 1):
        members = np.nonzero(comp_of_px == c)[0]
        penalty[np.ix_(members, members)] = 1.0 / len(members)
    z_flat = scipy.sparse.linalg.spsolve((ata + penalty.tocsr()).tocsc(), atb)

    for c in range(1, n_comp + 1):
        members = comp_of_px == c
        z_flat[members] -= z_flat[members].mean()

    z = np.zeros(mask.shape, dtype=np.float64)
    z[mask] = z_flat
    return DepthMap(z, mask.copy(), space=g.space)
