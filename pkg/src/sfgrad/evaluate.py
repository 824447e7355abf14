"""Depth alignment, millimeter MAE, and error-map rendering."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .geometry import DepthMap

ERROR_CEILING_MM = 1.0


def align_depth(est: DepthMap, gt: DepthMap, mode: str = "offset") -> DepthMap:
    """Remove the gauge freedom of an estimated depth against ground truth.

    offset: subtract the median of (est - gt); robust to outlier islands.
    scale: multiply by the median of gt/est over positive depths.
    """
    if est.shape != gt.shape:
        raise DataError("aligned depths must share one shape")
    mask = est.mask & gt.mask
    if not mask.any():
        raise DataError("empty overlap between estimate and ground truth")
    e = est.values[mask]
    g = gt.values[mask]
    if mode == "offset":
        shift = np.median(e - g)
        vals = est.values - shift
    elif mode == "scale":
        ok = (e > 0) & (g > 0)
        if not ok.any():
            raise DataError("scale alignment needs positive depths")
        factor = np.median(g[ok] / e[ok])
        vals = est.values * factor
    else:
        raise DataError(f"unknown alignment mode {mode!r}")
    return DepthMap(np.where(est.mask, vals, 0.0), est.mask.copy(),
                    space=est.space, relative=est.relative)


def mae_mm(est: DepthMap, gt: DepthMap, mask: np.ndarray | None = None,
           mu: float = 1.0, align: str | None = "offset") -> float:
    """Mean absolute depth error in millimeters after gauge alignment.

    Both depths are relative (z / mu); mu converts the mean error back to
    millimeters.  Pass align=None to compare raw values.
    """
    if est.shape != gt.shape:
        raise DataError("MAE inputs must share one shape")
    if align is not None:
        est = align_depth(est, gt, mode=align)
    m = est.mask & gt.mask if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise DataError("empty evaluation mask")
    return float(mu * np.mean(np.abs(est.values[m] - gt.values[m])))


def _heat_ramp() -> np.ndarray:
    """256x3 uint8 monotone ramp: black, red, yellow, white."""
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(3.0 * x, 0, 1)
    g = np.clip(3.0 * x - 1.0, 0, 1)
    b = np.clip(3.0 * x - 2.0, 0, 1)
    return (np.stack([r, g, b], axis=1) * 255).round().astype(np.uint8)


_RAMP = _heat_ramp()


def error_map(est: DepthMap, gt: DepthMap, mu: float = 1.0,
              ceiling_mm: float = ERROR_CEILING_MM,
              align: str | None = "offset") -> np.ndarray:
    """Per-pixel |est - gt| * mu as an 8-bit heat image; masked-out black."""
    if ceiling_mm <= 0:
        raise DataError("error ceiling must be positive")
    if est.shape != gt.shape:
        raise DataError("error map inputs must share one shape")
    if align is not None:
        est = align_depth(est, gt, mode=align)
    mask = est.mask & gt.mask
    err = np.abs(est.values - gt.values) * mu
    idx = np.clip(err / ceiling_mm * 255.0, 0, 255).astype(np.uint8)
    img = _RAMP[idx]
    img[~mask] = 0
    return img
