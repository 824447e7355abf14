"""Stage I integrator: a spectral neural operator with a self-learned
discontinuity attention map, evaluated coarse-to-fine over a resolution
pyramid.

Each pyramid level lifts the residual between the target gradients and the
gradient of the current depth estimate into a feature field, pushes it
through a stack of Fourier layers (pointwise transform + truncated spectral
convolution + GELU), projects back to a scalar correction, and applies the
correction to the running depth.  Perspective inputs iterate in log depth,
orthographic inputs in linear depth.  The attention head turns one-sided
depth jumps into a [0, 1] smoothness confidence per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericalError
from .geometry import (
    AttentionWeightMap,
    CameraModel,
    DepthMap,
    GradientField,
    NormalMap,
    gradients_from_normals,
    masked_diff_coefficients,
    normalized_coords,
    perspective_denominator,
)

COARSEST_SIDE = 32
OMEGA_EPS = 1e-8
_BIG = 1e30


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class SpectralWeights:
    """Truncated complex mode weights, shape (k_max_u, k_max_v, width, width)."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.complex128)
        if self.table.ndim != 4 or self.table.shape[2] != self.table.shape[3]:
            raise DataError("spectral weights must have shape (ku, kv, d, d)")
        if min(self.table.shape[:2]) < 1:
            raise DataError("spectral weights need at least one mode per axis")


@dataclass
class FourierLayer:
    pointwise: np.ndarray  # (d, d)
    bias: np.ndarray  # (d,)
    spectral: SpectralWeights

    def __post_init__(self):
        self.pointwise = np.asarray(self.pointwise, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.pointwise.shape[0]
        if self.pointwise.shape != (d, d):
            raise DataError("pointwise transform must be square")
        if self.bias.shape != (d,) or self.spectral.table.shape[2] != d:
            raise DataError("layer dimensions are inconsistent")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (c_in, c_out)
    bias: np.ndarray  # (c_out,)


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (3, 3, c_in, c_out)
    bias: np.ndarray  # (c_out,)


@dataclass
class FninHyper:
    n_layers: int = 4
    k_max: int = 16
    width: int = 32
    attention_width: int = 16


@dataclass
class FninParams:
    """All learnable parameters of the two-network integrator."""

    lift: list[DenseLayer]
    project: list[DenseLayer]
    initial_net: list[FourierLayer]
    iterative_net: list[FourierLayer]
    attention_extractor: list[ConvLayer]
    attention_regressor: list[ConvLayer]
    hyper: FninHyper = field(default_factory=FninHyper)

    def validate(self):
        hp = self.hyper
        if len(self.initial_net) != hp.n_layers or len(self.iterative_net) != hp.n_layers:
            raise DataError("initial and iterative nets must both have n_layers layers")
        for net in (self.initial_net, self.iterative_net):
            for layer in net:
                if layer.pointwise.shape != (hp.width, hp.width):
                    raise DataError("Fourier layer width mismatch")
                if layer.spectral.table.shape != (hp.k_max, hp.k_max, hp.width, hp.width):
                    raise DataError("spectral table shape mismatch")
        if self.lift[0].weight.shape[0] != 4 or self.lift[-1].weight.shape[1] != hp.width:
            raise DataError("lift must map 4 input channels to the feature width")
        if self.project[-1].weight.shape[1] != 1:
            raise DataError("projection must end in one channel")
        if self.attention_extractor[0].kernel.shape[2] != 1:
            raise DataError("attention extractor expects one input channel")
        if self.attention_regressor[-1].kernel.shape[3] != 1:
            raise DataError("attention regressor must end in one channel")
        return self


def named_arrays(params: FninParams) -> list[tuple[str, np.ndarray]]:
    """Deterministic (name, tensor) traversal used by training and storage."""
    out = []
    for i, layer in enumerate(params.lift):
        out += [(f"lift.{i}.weight", layer.weight), (f"lift.{i}.bias", layer.bias)]
    for i, layer in enumerate(params.project):
        out += [(f"project.{i}.weight", layer.weight), (f"project.{i}.bias", layer.bias)]
    for net_name, net in (("initial", params.initial_net), ("iterative", params.iterative_net)):
        for t, layer in enumerate(net):
            out += [(f"{net_name}.{t}.pointwise", layer.pointwise),
                    (f"{net_name}.{t}.bias", layer.bias),
                    (f"{net_name}.{t}.spectral", layer.spectral.table)]
    for stack_name, stack in (("att_extract", params.attention_extractor),
                              ("att_regress", params.attention_regressor)):
        for i, layer in enumerate(stack):
            out += [(f"{stack_name}.{i}.kernel", layer.kernel),
                    (f"{stack_name}.{i}.bias", layer.bias)]
    return out


def params_with_arrays(params: FninParams, arrays: dict[str, np.ndarray]) -> FninParams:
    """Copy of ``params`` with tensors replaced by the named arrays."""

    def dense(prefix, layers):
        return [DenseLayer(arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"])
                for i in range(len(layers))]

    def fourier(prefix, layers):
        return [FourierLayer(arrays[f"{prefix}.{t}.pointwise"], arrays[f"{prefix}.{t}.bias"],
                             SpectralWeights(arrays[f"{prefix}.{t}.spectral"]))
                for t in range(len(layers))]

    def conv(prefix, layers):
        return [ConvLayer(arrays[f"{prefix}.{i}.kernel"], arrays[f"{prefix}.{i}.bias"])
                for i in range(len(layers))]

    return FninParams(
        lift=dense("lift", params.lift),
        project=dense("project", params.project),
        initial_net=fourier("initial", params.initial_net),
        iterative_net=fourier("iterative", params.iterative_net),
        attention_extractor=conv("att_extract", params.attention_extractor),
        attention_regressor=conv("att_regress", params.attention_regressor),
        hyper=replace(params.hyper),
    )


def init_params(seed: int = 0, n_layers: int = 4, k_max: int = 16,
                width: int = 32, attention_width: int = 16) -> FninParams:
    """Random initialization: uniform 1/sqrt(fan_in) for pointwise maps and
    convolutions, 1/(width * k_max^2) scale for the spectral tables."""
    rng = np.random.default_rng(seed)

    def dense(c_in, c_out):
        s = 1.0 / np.sqrt(c_in)
        return DenseLayer(rng.uniform(-s, s, (c_in, c_out)), rng.uniform(-s, s, c_out))

    def conv(c_in, c_out):
        s = 1.0 / np.sqrt(9 * c_in)
        return ConvLayer(rng.uniform(-s, s, (3, 3, c_in, c_out)), rng.uniform(-s, s, c_out))

    def fourier_net():
        scale = 1.0 / (width * k_max * k_max)
        layers = []
        for _ in range(n_layers):
            s = 1.0 / np.sqrt(width)
            pw = rng.uniform(-s, s, (width, width))
            bias = rng.uniform(-s, s, width)
            table = scale * (rng.random((k_max, k_max, width, width))
                             + 1j * rng.random((k_max, k_max, width, width)))
            layers.append(FourierLayer(pw, bias, SpectralWeights(table)))
        return layers

    ca = attention_width
    return FninParams(
        lift=[dense(4, width)],
        project=[dense(width, width), dense(width, 1)],
        initial_net=fourier_net(),
        iterative_net=fourier_net(),
        attention_extractor=[conv(1, ca), conv(ca, ca), conv(ca, ca)],
        attention_regressor=[conv(ca, ca), conv(ca, ca), conv(ca, 1)],
        hyper=FninHyper(n_layers, k_max, width, ca),
    ).validate()


def zeroed_projection(params: FninParams) -> FninParams:
    """Copy with an all-zero projection head (null-network fixed point)."""
    arrays = dict(named_arrays(params))
    for i in range(len(params.project)):
        arrays[f"project.{i}.weight"] = np.zeros_like(arrays[f"project.{i}.weight"])
        arrays[f"project.{i}.bias"] = np.zeros_like(arrays[f"project.{i}.bias"])
    return params_with_arrays(params, arrays)


# ---------------------------------------------------------------------------
# Feature field and the public single operations
# ---------------------------------------------------------------------------

@dataclass
class FeatureField:
    """Lifted feature maps, shape (H, W, width)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3:
            raise DataError("feature field must have shape (H, W, width)")
        if not np.isfinite(self.values).all():
            raise DataError("non-finite feature field")


def spectral_conv(v: FeatureField, weights: SpectralWeights) -> FeatureField:
    """Apply truncated spectral weights to a feature field (numpy facade)."""
    if not np.isfinite(v.values).all():
        raise DataError("non-finite input to spectral convolution")
    out = ad.spectral_apply(ad.wrap(v.values), ad.wrap(weights.table)).value
    return FeatureField(out, v.mask)


def fourier_layer_apply(v: FeatureField, layer: FourierLayer) -> FeatureField:
    """GELU(W v + spectral(v) + bias), pointwise over pixels."""
    if v.values.shape[2] != layer.pointwise.shape[0]:
        raise DataError("feature width does not match the layer")
    t = _fourier_layer_t(ad.wrap(v.values), ad.wrap(layer.pointwise),
                         ad.wrap(layer.bias), ad.wrap(layer.spectral.table))
    return FeatureField(t.value, v.mask)


def lift(residual: GradientField, coords: np.ndarray, layers: list[DenseLayer]) -> FeatureField:
    """Concatenate (p_res, q_res, u, v) and lift pixel-wise to the feature width."""
    t = _lift_t(ad.wrap(residual.p), ad.wrap(residual.q), coords,
                [(ad.wrap(l.weight), ad.wrap(l.bias)) for l in layers])
    return FeatureField(t.value, residual.mask)


def attention_weights(z: DepthMap, nz: np.ndarray, du: float, dv: float,
                      params: FninParams) -> AttentionWeightMap:
    """Smoothness confidence map from one-sided depth jumps (numpy facade)."""
    tp = {name: ad.wrap(a) for name, a in named_arrays(params)}
    t = _attention_t(ad.wrap(z.values), z.mask, np.asarray(nz, dtype=np.float64),
                     du, dv, tp, params)
    return AttentionWeightMap(t.value * z.mask, z.mask.copy())


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Row-normalized linear interpolation matrix between center-aligned grids.

    Rows sum to exactly 1, so constant fields are reproduced bit-for-bit.
    """
    key = (n_src, n_dst)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    # both grids span the same centered interval; map by fractional position
    pos = (np.arange(n_dst) - (n_dst - 1) / 2.0) * (n_src - 1) / (n_dst - 1) + (n_src - 1) / 2.0 \
        if n_dst > 1 else np.array([(n_src - 1) / 2.0])
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_src - 2) if n_src > 1 else np.zeros(len(pos), int)
    t = pos - lo
    a = np.zeros((n_dst, n_src))
    a[np.arange(n_dst), lo] = 1.0 - t
    if n_src > 1:
        a[np.arange(n_dst), lo + 1] += t
    a /= a.sum(axis=1, keepdims=True)
    _INTERP_CACHE[key] = a
    return a


def upsample_depth(z: DepthMap, target_hw: tuple[int, int]) -> DepthMap:
    """Bilinear resample in the depth's native space; nearest-neighbor mask."""
    th, tw = target_hw
    ar = interp_matrix(z.shape[0], th)
    ac = interp_matrix(z.shape[1], tw)
    vals = np.einsum("Ih,Jw,hw->IJ", ar, ac, z.values, optimize=True)
    ri = np.clip(np.round(np.argmax(ar, axis=1)), 0, z.shape[0] - 1).astype(int)
    ci = np.clip(np.round(np.argmax(ac, axis=1)), 0, z.shape[1] - 1).astype(int)
    mask = z.mask[ri[:, None], ci[None, :]]
    return DepthMap(vals, mask, space=z.space, relative=z.relative)


def _block_reduce(a: np.ndarray) -> np.ndarray:
    """Sum over 2x2 blocks (edge blocks may be 1-wide)."""
    h, w = a.shape[:2]
    hh, ww = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((hh, ww) + a.shape[2:], dtype=np.float64)
    for di in (0, 1):
        for dj in (0, 1):
            part = a[di::2, dj::2]
            out[: part.shape[0], : part.shape[1]] += part
    return out


def downsample_normals(n: NormalMap) -> NormalMap:
    """2x2 area average of the valid normals, renormalized.

    A coarse pixel is masked in iff at least one of its fine pixels is.
    """
    counts = _block_reduce(n.mask.astype(np.float64))
    mask = counts > 0
    summed = _block_reduce(np.where(n.mask[..., None], n.normals, 0.0))
    avg = summed / np.maximum(counts, 1.0)[..., None]
    norm = np.linalg.norm(avg, axis=-1)
    ok = mask & (norm > 1e-12)
    out = np.where(ok[..., None], avg / np.where(ok, norm, 1.0)[..., None], 0.0)
    ok = ok & (out[..., 2] > 0)
    out[~ok] = 0.0
    return NormalMap(out, ok)


def downsample_depth(z: DepthMap) -> DepthMap:
    """2x2 area average of valid depths; coarse pixel valid iff any fine one is."""
    counts = _block_reduce(z.mask.astype(np.float64))
    mask = counts > 0
    summed = _block_reduce(np.where(z.mask, z.values, 0.0))
    vals = summed / np.maximum(counts, 1.0)
    return DepthMap(np.where(mask, vals, 0.0), mask, space=z.space, relative=z.relative)


def pyramid_shapes(height: int, width: int) -> list[tuple[int, int]]:
    """Level shapes, coarsest first: halve while the short side stays >= 32."""
    shapes = [(height, width)]
    while min(shapes[-1]) // 2 >= COARSEST_SIDE:
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes[::-1]


def normal_pyramid(n: NormalMap) -> list[NormalMap]:
    """Downsampled normal maps matching ``pyramid_shapes``, coarsest first."""
    levels = [n]
    while min(levels[-1].shape) // 2 >= COARSEST_SIDE:
        levels.append(downsample_normals(levels[-1]))
    return levels[::-1]


# ---------------------------------------------------------------------------
# Differentiable building blocks (tensor level)
# ---------------------------------------------------------------------------

def _mlp_t(x, layers):
    for i, (w, b) in enumerate(layers):
        x = ad.channels_dense(x, w) + b
        if i < len(layers) - 1:
            x = ad.gelu(x)
    return x


def _conv_stack_t(x, layers):
    for i, (k, b) in enumerate(layers):
        x = ad.conv3x3_valid(ad.pad_replicate(x, 1), k) + b
        if i < len(layers) - 1:
            x = ad.gelu(x)
    return x


def _fourier_layer_t(v, pointwise, bias, table):
    return ad.gelu(ad.channels_dense(v, pointwise) + ad.spectral_apply(v, table) + bias)


def _lift_t(p_res, q_res, coords, layers):
    chans = ad.concat([
        p_res[..., None] if p_res.value.ndim == 2 else p_res,
        q_res[..., None] if q_res.value.ndim == 2 else q_res,
        ad.wrap(coords[..., 0:1]),
        ad.wrap(coords[..., 1:2]),
    ], axis=-1)
    return _mlp_t(chans, layers)


def _central_grad_t(z, mask, delta):
    """Mask-aware central differences of a depth tensor; returns (du, dv)."""
    cu = masked_diff_coefficients(mask, axis=1, delta=delta)
    cv = masked_diff_coefficients(mask, axis=0, delta=delta)
    zu = cu[0] * ad.roll(z, -1, 1) + cu[1] * ad.roll(z, 1, 1) + cu[2] * z
    zv = cv[0] * ad.roll(z, -1, 0) + cv[1] * ad.roll(z, 1, 0) + cv[2] * z
    return zu, zv


def _one_sided_t(z, mask, nz):
    """Four neighbor jumps scaled by nz; invalid entries are zero."""
    out = []
    for shift, axis in ((-1, 1), (1, 1), (-1, 0), (1, 0)):
        neighbor_ok = mask & _shift_mask(mask, shift, axis)
        d = (z - ad.roll(z, shift, axis)) * (nz * neighbor_ok)
        out.append(d)
    return out  # du_pos, du_neg, dv_pos, dv_neg


def _shift_mask(mask, shift, axis):
    m = np.zeros_like(mask)
    if axis == 1:
        if shift == -1:
            m[:, :-1] = mask[:, 1:]
        else:
            m[:, 1:] = mask[:, :-1]
    else:
        if shift == -1:
            m[:-1, :] = mask[1:, :]
        else:
            m[1:, :] = mask[:-1, :]
    return m


def discontinuity_measure(z: DepthMap, nz: np.ndarray, du: float, dv: float) -> np.ndarray:
    """Squared one-sided depth jumps summed over the four directions,
    each axis scaled by its cell size."""
    t = _discontinuity_t(ad.wrap(z.values), z.mask,
                         np.asarray(nz, dtype=np.float64), du, dv)
    return t.value


def _discontinuity_t(z, mask, nz, du, dv):
    dup, dun, dvp, dvn = _one_sided_t(z, mask, nz)
    return (dup * dup + dun * dun) * (1.0 / du) + (dvp * dvp + dvn * dvn) * (1.0 / dv)


def _attention_t(z, mask, nz, du, dv, tp, params: FninParams):
    """Tensor-level attention map in [0, 1]; 0.5 when the response is flat."""
    dis = _discontinuity_t(z, mask, nz, du, dv)
    phi = _conv_stack_t(dis[..., None],
                        [(tp[f"att_extract.{i}.kernel"], tp[f"att_extract.{i}.bias"])
                         for i in range(len(params.attention_extractor))])
    raw = _conv_stack_t(phi,
                        [(tp[f"att_regress.{i}.kernel"], tp[f"att_regress.{i}.bias"])
                         for i in range(len(params.attention_regressor))])
    raw = raw[..., 0]
    mask_f = mask.astype(np.float64)
    if not mask.any():
        raise DataError("attention map over an empty mask")
    lo = ad.reduce_min(raw * mask_f + _BIG * (1.0 - mask_f))
    hi = ad.reduce_max(raw * mask_f - _BIG * (1.0 - mask_f))
    if hi.item() - lo.item() <= OMEGA_EPS:
        return ad.wrap(np.full(mask.shape, 0.5))
    return (raw - lo) / (hi - lo + OMEGA_EPS)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def tensorize(params: FninParams, requires_grad: bool = False) -> dict[str, ad.Tensor]:
    return {name: (ad.parameter(a) if requires_grad else ad.wrap(a))
            for name, a in named_arrays(params)}


def forward_levels(n: NormalMap, cam: CameraModel, tp: dict[str, ad.Tensor],
                   params: FninParams) -> list[dict]:
    """Coarse-to-fine forward pass; returns per-level records.

    Each record holds the linear-space depth tensor ``z`` (positive under
    the log-space iteration), the attention tensor ``omega``, the level
    mask, camera and normal map.  Raises NumericalError naming the level
    and layer if features stop being finite.
    """
    params.validate()
    hp = params.hyper
    levels = normal_pyramid(n)
    log_space = cam.projection == "perspective"
    lift_layers = [(tp[f"lift.{i}.weight"], tp[f"lift.{i}.bias"])
                   for i in range(len(params.lift))]
    project_layers = [(tp[f"project.{i}.weight"], tp[f"project.{i}.bias"])
                      for i in range(len(params.project))]

    records = []
    z_prev = None
    for r, n_r in enumerate(levels, start=1):
        h, w = n_r.shape
        cam_r = cam.at_resolution(h, w)
        coords = normalized_coords(cam_r)
        delta = cam_r.cell_size
        g = gradients_from_normals(n_r, cam_r)
        mask = g.mask
        p = np.where(mask, g.p, 0.0)
        q = np.where(mask, g.q, 0.0)

        if z_prev is None:
            z_prev = ad.wrap(np.ones((h, w)))
        z_hat = ad.log(z_prev) if log_space else z_prev
        gu, gv = _central_grad_t(z_hat, mask, delta)
        v = _lift_t(ad.wrap(p) - gu * mask, ad.wrap(q) - gv * mask, coords, lift_layers)

        net = "initial" if r == 1 else "iterative"
        for t in range(hp.n_layers):
            v = _fourier_layer_t(v, tp[f"{net}.{t}.pointwise"], tp[f"{net}.{t}.bias"],
                                 tp[f"{net}.{t}.spectral"])
            if not np.isfinite(v.value).all():
                raise NumericalError(f"non-finite features at resolution {r}, layer {t}")
        correction = _mlp_t(v, project_layers)[..., 0]
        z_new_native = z_hat + correction
        z_lin = ad.exp(z_new_native) if log_space else z_new_native
        if not np.isfinite(z_lin.value).all():
            raise NumericalError(f"non-finite depth at resolution {r}")

        z_native = z_new_native
        nz = perspective_denominator(n_r, cam_r) if log_space else n_r.normals[..., 2]
        omega = _attention_t(z_native, mask, np.where(mask, nz, 0.0), delta, delta, tp, params)

        records.append({
            "z": z_lin, "z_native": z_native, "omega": omega,
            "mask": mask, "cam": cam_r, "normals": n_r, "space": "log" if log_space else "linear",
        })
        if r < len(levels):
            nh, nw = levels[r].shape
            ar = interp_matrix(h, nh)
            ac = interp_matrix(w, nw)
            z_prev = ad.interp_sep(z_lin, ar, ac)
    return records


def fnin_forward(n: NormalMap, cam: CameraModel,
                 params: FninParams) -> tuple[DepthMap, AttentionWeightMap]:
    """Full Stage I forward pass.

    Returns the finest-level depth (log space under perspective, linear
    otherwise, relative units) and the finest attention map.
    """
    tp = tensorize(params, requires_grad=False)
    records = forward_levels(n, cam, tp, params)
    last = records[-1]
    if last["space"] == "log":
        depth = DepthMap(last["z_native"].value, last["mask"], space="log", relative=True)
    else:
        depth = DepthMap(last["z"].value, last["mask"], space="linear", relative=True)
    omega = AttentionWeightMap(last["omega"].value * last["mask"], last["mask"].copy())
    return depth, omega
