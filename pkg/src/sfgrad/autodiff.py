"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the operator network and its loss actually use are
implemented.  Every primitive carries a hand-written adjoint; the test suite
checks each one against central finite differences, and the spectral
primitive additionally against the transform-adjoint identity.

Complex parameters store their gradient as a complex array whose real and
imaginary parts are the partial derivatives with respect to the real and
imaginary parts of the parameter, so plain gradient descent on (re, im)
pairs reads them off directly.
"""

from __future__ import annotations

import numpy as np

_GELU_C0 = np.sqrt(2.0 / np.pi)
_GELU_C1 = 0.044715


class Tensor:
    """Node in the computation tape."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    # make ndarray <op> Tensor defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        if not self.requires_grad:
            self.parents = ()
            self.backward_fn = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self, seed=None):
        """Reverse sweep from this node; seed defaults to ones."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.value) if seed is None else seed)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    dtype = np.complex128 if np.iscomplexobj(arr) else np.float64
    return Tensor(arr.astype(dtype, copy=False))


def parameter(x) -> Tensor:
    return Tensor(np.asarray(x), requires_grad=True)


def _attach(out: Tensor, fn):
    """Register the backward closure only when the output is on the tape."""
    if out.requires_grad:
        out.backward_fn = fn
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = Tensor(a.value + b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return _attach(out, backward)


def mul(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = Tensor(a.value * b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return _attach(out, backward)


def div(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = Tensor(a.value / b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.value / b.value ** 2, b.value.shape))

    return _attach(out, backward)


def exp(a) -> Tensor:
    a = wrap(a)
    val = np.exp(a.value)
    out = Tensor(val, parents=(a,))

    def backward(g):
        a._accumulate(g * val)

    return _attach(out, backward)


def log(a) -> Tensor:
    a = wrap(a)
    out = Tensor(np.log(a.value), parents=(a,))

    def backward(g):
        a._accumulate(g / a.value)

    return _attach(out, backward)


def sqrt(a) -> Tensor:
    a = wrap(a)
    val = np.sqrt(a.value)
    out = Tensor(val, parents=(a,))

    def backward(g):
        a._accumulate(g * 0.5 / val)

    return _attach(out, backward)


def absolute(a) -> Tensor:
    """|a| with the subgradient at 0 taken as 0."""
    a = wrap(a)
    out = Tensor(np.abs(a.value), parents=(a,))

    def backward(g):
        a._accumulate(g * np.sign(a.value))

    return _attach(out, backward)


def clamp_min(a, floor: float) -> Tensor:
    a = wrap(a)
    out = Tensor(np.maximum(a.value, floor), parents=(a,))

    def backward(g):
        a._accumulate(g * (a.value > floor))

    return _attach(out, backward)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    a = wrap(a)
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C0 * x * (1.0 + _GELU_C1 * x2))
    out = Tensor(0.5 * x * (1.0 + t), parents=(a,))

    def backward(g):
        dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _attach(out, backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = wrap(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    return _attach(out, backward)


def reduce_max(a) -> Tensor:
    """Global maximum; gradient routes to the first maximizer."""
    a = wrap(a)
    flat_idx = int(np.argmax(a.value))
    out = Tensor(a.value.reshape(-1)[flat_idx], parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.value)
        ga.reshape(-1)[flat_idx] = g
        a._accumulate(ga)

    return _attach(out, backward)


def reduce_min(a) -> Tensor:
    a = wrap(a)
    flat_idx = int(np.argmin(a.value))
    out = Tensor(a.value.reshape(-1)[flat_idx], parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.value)
        ga.reshape(-1)[flat_idx] = g
        a._accumulate(ga)

    return _attach(out, backward)


def getitem(a, key) -> Tensor:
    a = wrap(a)
    out = Tensor(a.value[key], parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.value)
        ga[key] += g
        a._accumulate(ga)

    return _attach(out, backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _attach(out, backward)


def roll(a, shift: int, axis: int) -> Tensor:
    a = wrap(a)
    out = Tensor(np.roll(a.value, shift, axis=axis), parents=(a,))

    def backward(g):
        a._accumulate(np.roll(g, -shift, axis=axis))

    return _attach(out, backward)


def channels_dense(x, w) -> Tensor:
    """Pixel-wise linear map over the trailing channel axis: (..., i) @ (i, o)."""
    x, w = wrap(x), wrap(w)
    out = Tensor(np.einsum("...i,io->...o", x.value, w.value, optimize=True),
                 parents=(x, w))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.einsum("...o,io->...i", g, w.value, optimize=True))
        if w.requires_grad:
            w._accumulate(np.einsum("...i,...o->io", x.value, g, optimize=True))

    return _attach(out, backward)


def pad_replicate(x, width: int) -> Tensor:
    """Replicate-pad the two leading (spatial) axes by ``width``."""
    x = wrap(x)
    h, w = x.value.shape[:2]
    iu = np.clip(np.arange(-width, h + width), 0, h - 1)
    jv = np.clip(np.arange(-width, w + width), 0, w - 1)
    out = Tensor(x.value[iu[:, None], jv[None, :]], parents=(x,))

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (iu[:, None], jv[None, :]), g)
        x._accumulate(gx)

    return _attach(out, backward)


def conv3x3_valid(x, k) -> Tensor:
    """Valid 3x3 correlation: x (H+2, W+2, Ci) with k (3, 3, Ci, Co)."""
    x, k = wrap(x), wrap(k)
    windows = np.lib.stride_tricks.sliding_window_view(x.value, (3, 3), axis=(0, 1))
    out = Tensor(np.einsum("hwcuv,uvco->hwo", windows, k.value, optimize=True),
                 parents=(x, k))

    def backward(g):
        if k.requires_grad:
            k._accumulate(np.einsum("hwcuv,hwo->uvco", windows, g, optimize=True))
        if x.requires_grad:
            gp = np.pad(g, ((2, 2), (2, 2), (0, 0)))
            gwin = np.lib.stride_tricks.sliding_window_view(gp, (3, 3), axis=(0, 1))
            kf = k.value[::-1, ::-1]
            x._accumulate(np.einsum("abouv,uvco->abc", gwin, kf, optimize=True))

    return _attach(out, backward)


def interp_sep(x, ar: np.ndarray, ac: np.ndarray) -> Tensor:
    """Separable linear resampling: out = ar @ x @ ac^T over leading axes."""
    x = wrap(x)
    out = Tensor(np.einsum("Ih,Jw,hw...->IJ...", ar, ac, x.value, optimize=True),
                 parents=(x,))

    def backward(g):
        x._accumulate(np.einsum("Ih,Jw,IJ...->hw...", ar, ac, g, optimize=True))

    return _attach(out, backward)


# ---------------------------------------------------------------------------
# Spectral multiplication with truncated, conjugate-symmetric weights
# ---------------------------------------------------------------------------

class SpectralPlan:
    """Placement bookkeeping for a weight table on one grid size.

    Slot (a, b) of a (ku, kv) table addresses the signed frequency pair
    (fx(a), b) with fx spanning ku values in fft order (non-negative then
    negative).  Each slot writes its value at that frequency and its
    conjugate at the mirrored frequency, which keeps the full multiplier
    Hermitian and the output real.  Bins written more than once (the fy = 0
    column and self-mirrored bins) average their contributions.  Slots whose
    frequency exceeds the grid Nyquist are clipped.
    """

    def __init__(self, h: int, w: int, ku: int, kv: int):
        self.h, self.w, self.ku, self.kv = h, w, ku, kv
        half_pos = (ku + 1) // 2
        slots, bins_d, bins_m = [], [], []
        for a in range(ku):
            fx = a if a < half_pos else a - ku
            if abs(fx) > h // 2:
                continue
            for b in range(kv):
                if b > w // 2:
                    continue
                slots.append(a * kv + b)
                bins_d.append((fx % h) * w + (b % w))
                bins_m.append(((-fx) % h) * w + ((-b) % w))
        self.slots = np.asarray(slots, dtype=np.intp)
        all_bins = np.asarray(bins_d + bins_m, dtype=np.intp)
        uniq, inverse = np.unique(all_bins, return_inverse=True)
        n = len(slots)
        self.bin_rows = uniq // w
        self.bin_cols = uniq % w
        self.direct_pos = inverse[:n]
        self.mirror_pos = inverse[n:]
        counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
        self.inv_counts = 1.0 / counts
        self.n_bins = len(uniq)

    def multiplier_entries(self, r_flat: np.ndarray) -> np.ndarray:
        """Per-bin (d, d) matrices averaged from the slot table."""
        d = r_flat.shape[-1]
        m = np.zeros((self.n_bins, r_flat.shape[-2], d), dtype=np.complex128)
        np.add.at(m, self.direct_pos, r_flat[self.slots])
        np.add.at(m, self.mirror_pos, np.conj(r_flat[self.slots]))
        m *= self.inv_counts[:, None, None]
        return m


_PLAN_CACHE: dict[tuple[int, int, int, int], SpectralPlan] = {}


def spectral_plan(h: int, w: int, ku: int, kv: int) -> SpectralPlan:
    key = (h, w, ku, kv)
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        plan = _PLAN_CACHE[key] = SpectralPlan(h, w, ku, kv)
    return plan


def spectral_apply(v, r) -> Tensor:
    """Truncated per-mode matrix multiplication in Fourier space.

    v: (H, W, d) real features.  r: (ku, kv, d, d) complex weights.
    Returns the real inverse transform of the retained, symmetrized modes.
    """
    v, r = wrap(v), wrap(r)
    h, w, d = v.value.shape
    ku, kv = r.value.shape[:2]
    plan = spectral_plan(h, w, ku, kv)
    r_flat = r.value.reshape(ku * kv, d, d)
    m = plan.multiplier_entries(r_flat)
    x_hat = np.fft.fft2(v.value, axes=(0, 1))
    xb = x_hat[plan.bin_rows, plan.bin_cols]
    yb = np.einsum("kij,kj->ki", m, xb, optimize=True)
    y_hat = np.zeros_like(x_hat)
    y_hat[plan.bin_rows, plan.bin_cols] = yb
    out = Tensor(np.fft.ifft2(y_hat, axes=(0, 1)).real, parents=(v, r))

    def backward(g):
        g_hat = np.fft.fft2(g, axes=(0, 1))
        gb = g_hat[plan.bin_rows, plan.bin_cols]
        if v.requires_grad:
            dyb = np.einsum("kji,kj->ki", np.conj(m), gb, optimize=True)
            dy_hat = np.zeros_like(g_hat)
            dy_hat[plan.bin_rows, plan.bin_cols] = dyb
            v._accumulate(np.fft.ifft2(dy_hat, axes=(0, 1)).real)
        if r.requires_grad:
            gbins = gb / (h * w)
            gd = gbins[plan.direct_pos]
            gm = gbins[plan.mirror_pos]
            xd = xb[plan.direct_pos]
            xm = xb[plan.mirror_pos]
            cd = plan.inv_counts[plan.direct_pos][:, None, None]
            cm = plan.inv_counts[plan.mirror_pos][:, None, None]
            gr = np.zeros((ku * kv, d, d), dtype=np.complex128)
            gr[plan.slots] = (cd * np.einsum("ki,kj->kij", gd, np.conj(xd), optimize=True)
                              + cm * np.einsum("ki,kj->kij", np.conj(gm), xm, optimize=True))
            r._accumulate(gr.reshape(r.value.shape))

    return _attach(out, backward)


def spectral_kernel(r: np.ndarray, h: int, w: int) -> np.ndarray:
    """Spatial circular-convolution kernel equivalent to ``spectral_apply``.

    Returns kernel of shape (h, w, d, d); real by construction since the
    embedded multiplier is Hermitian.
    """
    ku, kv, d, _ = r.shape
    plan = spectral_plan(h, w, ku, kv)
    m = plan.multiplier_entries(r.reshape(ku * kv, d, d))
    full = np.zeros((h, w, d, d), dtype=np.complex128)
    full[plan.bin_rows, plan.bin_cols] = m
    kern = np.fft.ifft2(full, axes=(0, 1))
    return kern.real
