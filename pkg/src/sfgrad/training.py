"""Detail-weighted training of the operator network on synthetic scenes.

The loss mixes an absolute depth term, gated by (1 - omega), with a normal
consistency term gated by gamma * omega, summed over every pyramid level.
Gradients come from the reverse-mode engine and are verified against central
finite differences by ``grad_check``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericalError
from .fno import (
    FninParams,
    downsample_depth,
    forward_levels,
    init_params,
    named_arrays,
    params_with_arrays,
    tensorize,
)
from .geometry import (
    AttentionWeightMap,
    CameraModel,
    DepthMap,
    NormalMap,
    masked_diff_coefficients,
    normalized_coords,
    normals_from_depth,
)

LOSS_GAMMA = 0.25
NORM_FLOOR = 1e-24


@dataclass
class AugmentConfig:
    """Mask-out patches and normal-space noise; disabled by default."""

    zero_patch_count: int = 0
    zero_patch_size: int = 50
    noise_sigma: float = 0.0


@dataclass
class TrainConfig:
    epochs: int = 15
    lr_max: float = 2e-3
    lr_decay: float = 0.9
    batch_size: int = 20
    loss_gamma: float = LOSS_GAMMA
    seed: int = 0
    weight_decay: float = 1e-2
    val_fraction: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr_max <= 0 or self.lr_decay <= 0 or self.batch_size <= 0:
            raise DataError("rates and batch size must be positive")
        if not 0.0 < self.loss_gamma < 1.0:
            raise DataError("loss gamma must lie in (0, 1)")


@dataclass
class SyntheticSample:
    depth: DepthMap  # relative, linear space
    normals: NormalMap
    cam: CameraModel
    kind: str = ""


@dataclass
class DatasetSpec:
    count: int = 200
    height: int = 64
    width: int = 64
    kinds: tuple[str, ...] = ("plane", "bump", "hemisphere", "sinusoid", "step")
    projection: str = "orthographic"
    f: float | None = None
    mu: float = 500.0
    base_depth: float = 1.0
    amplitude: float = 0.15
    augment: AugmentConfig = field(default_factory=AugmentConfig)


# ---------------------------------------------------------------------------
# Differentiable loss
# ---------------------------------------------------------------------------

def _points_t(z, cam: CameraModel):
    """Back-projected point channels of a linear-depth tensor."""
    coords = normalized_coords(cam)
    if cam.projection == "orthographic":
        h, w = coords.shape[:2]
        const_uv = np.broadcast_to(coords, (h, w, 2))
        return [ad.wrap(const_uv[..., 0]), ad.wrap(const_uv[..., 1]), z]
    return [z * (coords[..., 0] / cam.f), z * (coords[..., 1] / cam.f), z]


def _normals_t(z, mask, cam: CameraModel):
    """Differentiable copy of normals_from_depth; returns (n_t, valid)."""
    pts = _points_t(z, cam)
    delta = cam.cell_size
    cu = masked_diff_coefficients(mask, axis=1, delta=delta)
    cv = masked_diff_coefficients(mask, axis=0, delta=delta)

    def diff(p, c, axis):
        return c[0] * ad.roll(p, -1, axis) + c[1] * ad.roll(p, 1, axis) + c[2] * p

    du = [diff(p, cu, 1) for p in pts]
    dv = [diff(p, cv, 0) for p in pts]
    cross = [du[1] * dv[2] - du[2] * dv[1],
             du[2] * dv[0] - du[0] * dv[2],
             du[0] * dv[1] - du[1] * dv[0]]
    sq = cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]
    norm = ad.sqrt(ad.clamp_min(sq, NORM_FLOOR))
    valid = mask & (norm.value >= 1e-12)
    sign = np.where(cross[2].value < 0, -1.0, 1.0) * valid
    n = [c * sign / norm for c in cross]
    valid = valid & (np.abs(n[2].value) >= 1e-12)
    return n, valid


def _detail_loss_t(z_lin, omega, gt: DepthMap, mask, cam: CameraModel, gamma: float):
    """(1/N) sum of (1-w)|z - gt| + gamma * w * |n - n_gt|_1 over the mask."""
    m = mask & gt.mask
    n_px = int(m.sum())
    if n_px == 0:
        raise DataError("loss over an empty mask")
    mf = m.astype(np.float64)
    depth_term = ad.absolute(z_lin - gt.values) * ((1.0 - omega) * mf)

    n_est, valid_est = _normals_t(z_lin, m, cam)
    gt_lin = gt.to_linear()
    n_gt = normals_from_depth(gt_lin, cam)
    both = (valid_est & n_gt.mask).astype(np.float64)
    diff = (ad.absolute(n_est[0] - n_gt.normals[..., 0])
            + ad.absolute(n_est[1] - n_gt.normals[..., 1])
            + ad.absolute(n_est[2] - n_gt.normals[..., 2]))
    normal_term = diff * (gamma * both) * omega * mf
    return ad.reduce_sum(depth_term + normal_term) * (1.0 / n_px)


def detail_weighted_loss(z: DepthMap, z_gt: DepthMap, omega: AttentionWeightMap,
                         cam: CameraModel, gamma: float = LOSS_GAMMA) -> float:
    """Single-resolution loss on numpy inputs."""
    if z.shape != z_gt.shape or z.shape != omega.weights.shape:
        raise DataError("loss inputs must share one shape")
    z_lin = z.to_linear()
    loss = _detail_loss_t(ad.wrap(z_lin.values), ad.wrap(omega.weights),
                          z_gt.to_linear(), z_lin.mask, cam, gamma)
    return loss.item()


def gt_pyramid(gt: DepthMap, n_levels: int) -> list[DepthMap]:
    """Ground truth area-downsampled to each pyramid level, coarsest first."""
    levels = [gt]
    for _ in range(n_levels - 1):
        levels.append(downsample_depth(levels[-1]))
    return levels[::-1]


def multires_loss(outputs: list[tuple[DepthMap, AttentionWeightMap]],
                  gts: list[DepthMap], cam: CameraModel,
                  gamma: float = LOSS_GAMMA) -> float:
    """Sum of per-resolution losses, coarsest to finest."""
    if len(outputs) != len(gts):
        raise DataError("one ground truth per resolution required")
    total = 0.0
    for (z, omega), gt in zip(outputs, gts):
        level_cam = cam.at_resolution(*z.shape)
        total += detail_weighted_loss(z, gt, omega, level_cam, gamma)
    return total


def sample_loss_t(sample: SyntheticSample, tp, params: FninParams,
                  gamma: float = LOSS_GAMMA):
    """Tensor-valued multiresolution loss of one sample."""
    records = forward_levels(sample.normals, sample.cam, tp, params)
    gts = gt_pyramid(sample.depth.to_linear(), len(records))
    total = None
    for rec, gt in zip(records, gts):
        term = _detail_loss_t(rec["z"], rec["omega"], gt, rec["mask"], rec["cam"], gamma)
        total = term if total is None else total + term
    return total


def sample_loss(params: FninParams, sample: SyntheticSample,
                gamma: float = LOSS_GAMMA) -> float:
    tp = tensorize(params, requires_grad=False)
    return sample_loss_t(sample, tp, params, gamma).item()


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    worst_tensor: str
    max_rel_error: float
    failures: list[str]
    skipped: int = 0
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(params: FninParams, sample: SyntheticSample, eps: float = 1e-5,
               n_coords: int = 20, tol: float = 1e-3, seed: int = 0,
               gamma: float = LOSS_GAMMA, kink_margin: float = 1e-4,
               kink_rtol: float = 1e-3, fd_atol: float = 5e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Samples ``n_coords`` coordinates per tensor (real and imaginary parts
    separately for spectral weights).  Requires a toy configuration and a
    base point clear of the |z - gt| kink band.  Coordinates whose one-sided
    slopes disagree by more than ``kink_rtol`` straddle one of the remaining
    L1 or extremum kinks and are excluded; the check fails outright if more
    than a quarter of the sampled coordinates land on kinks.

    ``fd_atol`` is the resolution limit of double-precision central
    differences through the full pipeline (round-off jitter of the loss
    divided by 2 * eps, plus sub-step L1 micro-kink bias); gaps below it are
    indistinguishable from noise, so the relative error uses
    max(|analytic|, |fd|, fd_atol / tol) as its denominator.  A directional
    derivative along one random direction, which averages that noise away,
    is additionally required to match the gradient to 1e-4.
    """
    h, w = sample.normals.shape
    if h > 16 or w > 16 or params.hyper.width > 8 or params.hyper.k_max > 4:
        raise DataError("grad_check expects a toy configuration "
                        "(grid <= 16x16, width <= 8, k_max <= 4)")
    rng = np.random.default_rng(seed)

    tp = tensorize(params, requires_grad=True)
    loss = sample_loss_t(sample, tp, params, gamma)
    # guard the non-differentiable |.| neighborhood of the depth term
    records = forward_levels(sample.normals, sample.cam, tensorize(params), params)
    for rec, gt in zip(records, gt_pyramid(sample.depth.to_linear(), len(records))):
        m = rec["mask"] & gt.mask
        gap = np.abs(rec["z"].value - gt.values)[m]
        if gap.size and gap.min() < kink_margin:
            raise NumericalError("base point lies in an L1 kink neighborhood; "
                                 "perturb the sample or parameters")
    base_loss = loss.item()
    loss.backward()

    arrays = dict(named_arrays(params))
    per_tensor: dict[str, float] = {}
    failures: list[str] = []
    skipped = checked = 0
    for name, base in arrays.items():
        grad = tp[name].grad
        if grad is None:
            grad = np.zeros_like(tp[name].value)
        flat = base.reshape(-1)
        n_pick = min(n_coords, flat.size)
        picks = rng.choice(flat.size, size=n_pick, replace=False)
        worst = 0.0
        for idx in picks:
            comps = (1.0, 1j) if np.iscomplexobj(base) else (1.0,)
            for comp in comps:
                an = grad.reshape(-1)[idx]
                an = float(an.real if comp == 1.0 else an.imag) if np.iscomplexobj(base) \
                    else float(an)

                def probe(step):
                    shifted = dict(arrays)
                    plus = flat.copy()
                    plus[idx] += step * comp
                    shifted[name] = plus.reshape(base.shape)
                    lp = sample_loss(params_with_arrays(params, shifted), sample, gamma)
                    minus = flat.copy()
                    minus[idx] -= step * comp
                    shifted[name] = minus.reshape(base.shape)
                    lm = sample_loss(params_with_arrays(params, shifted), sample, gamma)
                    left = (base_loss - lm) / step
                    right = (lp - base_loss) / step
                    kinked = abs(left - right) > max(
                        kink_rtol * max(abs(left), abs(right)), 2 * fd_atol)
                    return (lp - lm) / (2.0 * step), kinked

                fd, kinked = probe(eps)
                if kinked:
                    skipped += 1
                    continue
                checked += 1
                rel = abs(an - fd) / max(abs(an), abs(fd), fd_atol / tol)
                worst = max(worst, rel)
        per_tensor[name] = worst
        if worst > tol:
            failures.append(f"{name}: rel error {worst:.3e}")
    if skipped > 0.25 * max(skipped + checked, 1):
        failures.append(f"too many kink coordinates: {skipped} of {skipped + checked}")

    # micro-kink and round-off noise average out along a random direction,
    # so the directional derivative pins global correctness much tighter
    direction = {}
    dot = 0.0
    for name, arr in arrays.items():
        d = rng.standard_normal(arr.shape)
        if np.iscomplexobj(arr):
            d = d + 1j * rng.standard_normal(arr.shape)
        direction[name] = d
        g = tp[name].grad
        if g is None:
            continue
        if np.iscomplexobj(arr):
            dot += float(np.sum(g.real * d.real + g.imag * d.imag))
        else:
            dot += float(np.sum(g * d))
    norm = np.sqrt(sum(float((np.abs(d) ** 2).sum()) for d in direction.values()))
    scale = eps / max(norm, 1.0)
    lp = sample_loss(params_with_arrays(
        params, {n: arrays[n] + scale * direction[n] for n in arrays}), sample, gamma)
    lm = sample_loss(params_with_arrays(
        params, {n: arrays[n] - scale * direction[n] for n in arrays}), sample, gamma)
    directional_fd = (lp - lm) / (2.0 * scale)
    dir_rel = abs(directional_fd - dot) / max(abs(dot), abs(directional_fd), 1e-8)
    if dir_rel > 1e-4:
        failures.append(f"directional derivative off by {dir_rel:.3e}")

    worst_tensor = max(per_tensor, key=per_tensor.get)
    return GradCheckReport(per_tensor, worst_tensor, per_tensor[worst_tensor],
                           failures, skipped, checked)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def _scene_arrays(kind: str, coords: np.ndarray, rng: np.random.Generator,
                  z0: float, amp: float):
    """Depth values plus analytic gradient (zu, zv) of one parametric scene."""
    u, v = coords[..., 0], coords[..., 1]
    if kind == "plane":
        a, b = rng.uniform(-amp, amp, 2)
        return z0 + a * u + b * v, np.full_like(u, a), np.full_like(u, b)
    if kind == "bump":
        a = rng.uniform(0.5 * amp, amp) * rng.choice([-1.0, 1.0])
        cu_, cv_ = rng.uniform(-0.4, 0.4, 2)
        sig = rng.uniform(0.2, 0.45)
        g = a * np.exp(-((u - cu_) ** 2 + (v - cv_) ** 2) / (2 * sig ** 2))
        return z0 + g, -g * (u - cu_) / sig ** 2, -g * (v - cv_) / sig ** 2
    if kind.startswith("hemisphere"):
        r = float(kind.split(":", 1)[1]) if ":" in kind else rng.uniform(0.5, 0.85)
        rho2 = u ** 2 + v ** 2
        cap = rho2 <= (0.9 * r) ** 2
        edge = r * np.sqrt(1.0 - 0.9 ** 2)
        s = np.sqrt(np.maximum(r ** 2 - rho2, edge ** 2))
        # spherical cap away from the camera, continuous plane outside:
        # inside the cap n = (u, v, sqrt(r^2 - u^2 - v^2)) / r
        z = z0 + np.where(cap, s - edge, 0.0)
        zu = np.where(cap, -u / s, 0.0)
        zv = np.where(cap, -v / s, 0.0)
        return z, zu, zv
    if kind == "sinusoid":
        a = rng.uniform(0.3 * amp, amp)
        fu, fv = rng.integers(1, 3, 2)
        pu, pv = rng.uniform(0, 2 * np.pi, 2)
        z = z0 + a * np.sin(np.pi * fu * u + pu) * np.cos(np.pi * fv * v + pv)
        zu = a * np.pi * fu * np.cos(np.pi * fu * u + pu) * np.cos(np.pi * fv * v + pv)
        zv = -a * np.pi * fv * np.sin(np.pi * fu * u + pu) * np.sin(np.pi * fv * v + pv)
        return z, zu, zv
    if kind == "step":
        a, b = rng.uniform(-amp / 2, amp / 2, 2)
        height = rng.uniform(0.5 * amp, 2.0 * amp)
        edge = rng.uniform(-0.3, 0.3)
        vertical = rng.random() < 0.5
        region = (u > edge) if vertical else (v > edge)
        z = z0 + a * u + b * v + height * region
        return z, np.full_like(u, a), np.full_like(u, b)
    raise DataError(f"unknown scene kind {kind!r}")


def make_sample(kind: str, height: int, width: int, rng: np.random.Generator,
                spec: DatasetSpec) -> SyntheticSample:
    cam = CameraModel(spec.projection, width, height, f=spec.f, mu=spec.mu)
    coords = normalized_coords(cam)
    z, zu, zv = _scene_arrays(kind, coords, rng, spec.base_depth, spec.amplitude)
    mask = np.ones((height, width), dtype=bool)

    if spec.projection == "orthographic":
        # analytic normal from the gradient: proportional to (-zu, -zv, 1);
        # step scenes keep segment normals, the jump lives in the depth only
        n = np.stack([-zu, -zv, np.ones_like(zu)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
    else:
        nm = normals_from_depth(DepthMap(z, mask), cam)
        n = nm.normals
        mask = mask & nm.mask

    aug = spec.augment
    for _ in range(aug.zero_patch_count):
        ph = min(aug.zero_patch_size, height)
        pw = min(aug.zero_patch_size, width)
        i0 = int(rng.integers(0, max(height - ph, 0) + 1))
        j0 = int(rng.integers(0, max(width - pw, 0) + 1))
        mask[i0:i0 + ph, j0:j0 + pw] = False
    if not mask.any():
        mask[height // 2, width // 2] = True
    if aug.noise_sigma > 0:
        n = n + rng.normal(0.0, aug.noise_sigma, n.shape)
        n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        mask = mask & (n[..., 2] > 1e-6)
    n = np.where(mask[..., None], n, 0.0)

    return SyntheticSample(
        depth=DepthMap(np.where(mask, z, 0.0), mask, space="linear", relative=True),
        normals=NormalMap(n, mask),
        cam=cam,
        kind=kind,
    )


def synth_dataset(spec: DatasetSpec, seed: int = 0) -> list[SyntheticSample]:
    """Deterministic list of parametric scenes; same seed, same bytes."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(spec.count):
        kind = spec.kinds[i % len(spec.kinds)]
        samples.append(make_sample(kind, spec.height, spec.width, rng, spec))
    return samples


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------

def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Exponential schedule: lr_max * decay^epoch (epoch numbering from 0)."""
    return cfg.lr_max * cfg.lr_decay ** epoch


class AdamW:
    """Decoupled weight decay Adam over named numpy tensors.

    Complex tensors are updated through their (re, im) float views, so the
    moment estimates treat real and imaginary parts as independent.
    """

    def __init__(self, arrays: dict[str, np.ndarray], weight_decay: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.arrays = {k: v.copy() for k, v in arrays.items()}
        self.m = {k: np.zeros(self._view(v).shape) for k, v in self.arrays.items()}
        self.v = {k: np.zeros(self._view(v).shape) for k, v in self.arrays.items()}
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    @staticmethod
    def _view(a: np.ndarray) -> np.ndarray:
        return a.view(np.float64) if np.iscomplexobj(a) else a

    def step(self, grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, arr in self.arrays.items():
            g = self._view(np.ascontiguousarray(grads[name]))
            p = self._view(arr)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


def _mean_loss(params: FninParams, samples, gamma: float) -> float:
    tp = tensorize(params, requires_grad=False)
    return float(np.mean([sample_loss_t(s, tp, params, gamma).item() for s in samples]))


def train_toy(cfg: TrainConfig, dataset: list[SyntheticSample],
              params: FninParams | None = None,
              width: int = 16, attention_width: int = 8,
              k_max: int = 16) -> tuple[FninParams, list[EpochStats]]:
    """Train on a synthetic dataset; deterministic given (cfg, dataset).

    Row 0 of the history is the pre-training evaluation; row e reflects the
    model after e epochs at learning rate lr_max * decay^(e-1).
    """
    if params is None:
        params = init_params(seed=cfg.seed, width=width,
                             attention_width=attention_width, k_max=k_max)
    n_val = max(1, round(cfg.val_fraction * len(dataset)))
    if n_val >= len(dataset):
        raise DataError("dataset too small for a validation split")
    train_set, val_set = dataset[:-n_val], dataset[-n_val:]

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(dict(named_arrays(params)), weight_decay=cfg.weight_decay)
    history = [EpochStats(0, _mean_loss(params, train_set, cfg.loss_gamma),
                          _mean_loss(params, val_set, cfg.loss_gamma))]

    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[b0:b0 + cfg.batch_size]]
            params = params_with_arrays(params, opt.arrays)
            tp = tensorize(params, requires_grad=True)
            losses = []
            for sample in batch:
                loss = sample_loss_t(sample, tp, params, cfg.loss_gamma)
                if not np.isfinite(loss.value):
                    raise NumericalError(
                        f"training diverged at epoch {epoch}, batch {b0 // cfg.batch_size}")
                loss.backward(seed=np.asarray(1.0 / len(batch)))
                losses.append(loss.item())
            grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.value))
                     for name, t in tp.items()}
            opt.step(grads, lr)
            epoch_losses.append(float(np.mean(losses)))
        params = params_with_arrays(params, opt.arrays)
        history.append(EpochStats(epoch + 1, float(np.mean(epoch_losses)),
                                  _mean_loss(params, val_set, cfg.loss_gamma)))
    return params, history


def write_loss_history(path, history: list[EpochStats]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            writer.writerow([row.epoch, f"{row.train_loss:.10g}", f"{row.val_loss:.10g}"])
