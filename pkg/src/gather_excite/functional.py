"""Differentiable kernels over :class:`~gather_excite.tensor.Tensor`.

Every kernel preserves the floating dtype of its inputs, so the same code
serves the 32-bit production path and the 64-bit gradient-check path.
Window reductions (convolution taps, pooling) accumulate kernel positions in
row-major order, which fixes the floating point summation order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DimensionError, StateError
from .tensor import Tensor, make_result

_AXIS_NAMES = {0: "batch", 1: "channel", 2: "height", 3: "width"}


def _check_rank4(x, what="input"):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (N, C, H, W), got shape {x.shape}")


def _same_shape(a, b, op):
    if a.shape != b.shape:
        for axis, (p, q) in enumerate(zip(a.shape, b.shape)):
            if p != q:
                name = _AXIS_NAMES.get(axis, str(axis)) if a.ndim == 4 else str(axis)
                raise DimensionError(
                    f"{op}: shapes {a.shape} and {b.shape} differ on {name} axis ({axis})"
                )
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


def normalize_padding(pad):
    """Return ``((top, bottom), (left, right))`` from an int or nested pairs."""
    if isinstance(pad, (int, np.integer)):
        p = int(pad)
        return ((p, p), (p, p))
    (top, bottom), (left, right) = pad
    return ((int(top), int(bottom)), (int(left), int(right)))


def output_size(size, k, stride, pad_lead, pad_trail):
    return (size + pad_lead + pad_trail - k) // stride + 1


def _pad(x, pads, value=0.0):
    (t, b), (l, r) = pads
    if t == b == l == r == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)), constant_values=value)


def _unpad(xp, pads, h, w):
    (t, _), (l, _) = pads
    return xp[:, :, t : t + h, l : l + w]


def _tap(xp, i, j, stride, ho, wo):
    """View of the padded input seen by kernel position (i, j)."""
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    """2-d cross-correlation with zero padding and channel groups."""
    _check_rank4(x)
    _check_rank4(w, "weight")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if kh < 1 or kw < 1:
        raise ConfigurationError("kernel size must be >= 1")
    if cin % groups:
        raise DimensionError(f"channel axis (1): {cin} input channels not divisible by groups={groups}")
    if cout % groups:
        raise DimensionError(f"channel axis (0) of weight: {cout} outputs not divisible by groups={groups}")
    if cg != cin // groups:
        raise DimensionError(
            f"channel axis (1): weight expects {cg * groups} input channels, input has {cin}"
        )
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias shape {b.shape} does not match {cout} output channels")
    pads = normalize_padding(pad)
    if min(pads[0] + pads[1]) < 0:
        raise ConfigurationError("padding must be >= 0")
    ho = output_size(h, kh, stride, *pads[0])
    wo = output_size(wd, kw, stride, *pads[1])
    if ho < 1:
        raise DimensionError(f"height axis (2): kernel {kh} larger than padded input {h}")
    if wo < 1:
        raise DimensionError(f"width axis (3): kernel {kw} larger than padded input {wd}")

    xd, wdat = x.data, w.data
    dtype = np.result_type(xd, wdat)
    xd = xd.astype(dtype, copy=False)
    wdat = wdat.astype(dtype, copy=False)
    depthwise = groups == cin and cout == cin and cg == 1
    if depthwise:
        out = _depthwise_forward(xd, wdat, stride, pads, ho, wo)
    else:
        out = _grouped_forward(xd, wdat, stride, pads, ho, wo, groups)
    if b is not None:
        out += b.data.astype(dtype, copy=False)[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        if depthwise:
            dx, dw = _depthwise_backward(xd, wdat, g, stride, pads, ho, wo,
                                         x.requires_grad, w.requires_grad)
        else:
            dx, dw = _grouped_backward(xd, wdat, g, stride, pads, ho, wo, groups,
                                       x.requires_grad, w.requires_grad)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward_fn)


def _depthwise_forward(x, w, stride, pads, ho, wo):
    xp = _pad(x, pads)
    kh, kw = w.shape[2:]
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, stride, ho, wo) * w[:, 0, i, j][None, :, None, None]
    return out


def _depthwise_backward(x, w, g, stride, pads, ho, wo, need_dx, need_dw):
    xp = _pad(x, pads)
    kh, kw = w.shape[2:]
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.zeros_like(w) if need_dw else None
    for i in range(kh):
        for j in range(kw):
            if need_dw:
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, _tap(xp, i, j, stride, ho, wo))
            if need_dx:
                _tap(dxp, i, j, stride, ho, wo)[...] += g * w[:, 0, i, j][None, :, None, None]
    dx = _unpad(dxp, pads, x.shape[2], x.shape[3]) if need_dx else None
    return dx, dw


def _im2col(xp, kh, kw, stride, ho, wo):
    """Columns laid out as ``(C*kh*kw, N*ho*wo)``; rows ordered (channel, ki, kj)."""
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1:
        v = xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        return v.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = _tap(xp, i, j, stride, ho, wo).transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _grouped_forward(x, w, stride, pads, ho, wo, groups):
    n = x.shape[0]
    cout, cg, kh, kw = w.shape
    og = cout // groups
    xp = _pad(x, pads)
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    for gi in range(groups):
        cols = _im2col(xp[:, gi * cg : (gi + 1) * cg], kh, kw, stride, ho, wo)
        wm = w[gi * og : (gi + 1) * og].reshape(og, -1)
        res = wm @ cols
        out[:, gi * og : (gi + 1) * og] = res.reshape(og, n, ho, wo).transpose(1, 0, 2, 3)
    return out


def _grouped_backward(x, w, g, stride, pads, ho, wo, groups, need_dx, need_dw):
    n = x.shape[0]
    cout, cg, kh, kw = w.shape
    og = cout // groups
    xp = _pad(x, pads)
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.empty_like(w) if need_dw else None
    for gi in range(groups):
        gm = np.ascontiguousarray(g[:, gi * og : (gi + 1) * og].transpose(1, 0, 2, 3)).reshape(og, -1)
        if need_dw:
            cols = _im2col(xp[:, gi * cg : (gi + 1) * cg], kh, kw, stride, ho, wo)
            dw[gi * og : (gi + 1) * og] = (gm @ cols.T).reshape(og, cg, kh, kw)
        if need_dx:
            wm = w[gi * og : (gi + 1) * og].reshape(og, -1)
            dcols = (wm.T @ gm).reshape(cg, kh, kw, n, ho, wo)
            dsub = dxp[:, gi * cg : (gi + 1) * cg]
            for i in range(kh):
                for j in range(kw):
                    _tap(dsub, i, j, stride, ho, wo)[...] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = _unpad(dxp, pads, x.shape[2], x.shape[3]) if need_dx else None
    return dx, dw


# ---------------------------------------------------------------------------
# pooling and resizing


def _pool_geometry(x, k, stride, pad):
    _check_rank4(x)
    if k < 1 or stride < 1:
        raise ConfigurationError(f"pooling needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    pads = normalize_padding(pad)
    if max(pads[0] + pads[1]) >= k or min(pads[0] + pads[1]) < 0:
        raise ConfigurationError(f"pooling padding {pad} must satisfy 0 <= pad < k={k}")
    h, w = x.shape[2:]
    ho = output_size(h, k, stride, *pads[0])
    wo = output_size(w, k, stride, *pads[1])
    if ho < 1 or wo < 1:
        raise DimensionError(f"pooling window {k} larger than input {h}x{w}")
    return pads, ho, wo


def avg_pool2d(x, k, stride, pad=0):
    """Average pooling; zero padding counts towards the ``k*k`` divisor."""
    pads, ho, wo = _pool_geometry(x, k, stride, pad)
    xd = x.data
    xp = _pad(xd, pads)
    acc = np.zeros((xd.shape[0], xd.shape[1], ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            acc += _tap(xp, i, j, stride, ho, wo)
    area = xd.dtype.type(k * k)
    out = acc / area

    def backward_fn(g):
        dxp = np.zeros_like(xp)
        gs = g / area
        for i in range(k):
            for j in range(k):
                _tap(dxp, i, j, stride, ho, wo)[...] += gs
        return (_unpad(dxp, pads, xd.shape[2], xd.shape[3]),)

    return make_result(out, (x,), backward_fn)


def max_pool2d(x, k, stride, pad=0):
    """Max pooling; padded cells never win. Ties go to the first cell in scan order."""
    pads, ho, wo = _pool_geometry(x, k, stride, pad)
    xd = x.data
    xp = _pad(xd, pads, value=-np.inf)
    best = np.full((xd.shape[0], xd.shape[1], ho, wo), -np.inf, dtype=xd.dtype)
    arg = np.zeros(best.shape, dtype=np.int32)
    for i in range(k):
        for j in range(k):
            v = _tap(xp, i, j, stride, ho, wo)
            better = v > best
            best = np.where(better, v, best)
            arg[better] = i * k + j

    def backward_fn(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                _tap(dxp, i, j, stride, ho, wo)[...] += np.where(hit, g, 0)
        return (_unpad(dxp, pads, xd.shape[2], xd.shape[3]),)

    return make_result(best, (x,), backward_fn)


def nearest_index(in_size, out_size):
    return (np.arange(out_size) * in_size) // out_size


def nearest_interpolate(x, out_h, out_w):
    """Nearest-neighbour upsampling: ``out[u, v] = in[u*H//outH, v*W//outW]``."""
    _check_rank4(x)
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ConfigurationError(
            f"nearest_interpolate only upsamples: ({h}, {w}) -> ({out_h}, {out_w})"
        )
    xd = x.data
    if h == 1 and w == 1:
        out = np.broadcast_to(xd, xd.shape[:2] + (out_h, out_w)).copy()

        def backward_fn(g):
            return (g.sum(axis=(2, 3), keepdims=True),)

        return make_result(out, (x,), backward_fn)

    rows = nearest_index(h, out_h)
    cols = nearest_index(w, out_w)
    out = xd[:, :, rows][:, :, :, cols]
    # every source index appears (upsampling), in non-decreasing runs
    row_starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    col_starts = np.flatnonzero(np.r_[True, cols[1:] != cols[:-1]])

    def backward_fn(g):
        gr = np.add.reduceat(g, row_starts, axis=2)
        return (np.add.reduceat(gr, col_starts, axis=3),)

    return make_result(out, (x,), backward_fn)


def global_avg_pool(x):
    """Spatial mean, keeping a ``(N, C, 1, 1)`` shape."""
    _check_rank4(x)
    xd = x.data
    h, w = xd.shape[2:]
    out = xd.mean(axis=(2, 3), keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g / xd.dtype.type(h * w), xd.shape).copy(),)

    return make_result(out, (x,), backward_fn)


def global_max_pool(x):
    """Spatial maximum, keeping ``(N, C, 1, 1)``; ties go to the first cell in scan order."""
    _check_rank4(x)
    xd = x.data
    n, c, h, w = xd.shape
    flat = xd.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2).reshape(n, c, 1, 1)

    def backward_fn(g):
        d = np.zeros_like(flat, dtype=g.dtype)
        np.put_along_axis(d, arg[:, :, None], g.reshape(n, c, 1), axis=2)
        return (d.reshape(xd.shape),)

    return make_result(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# pointwise


def sigmoid(x):
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward_fn)


def relu(x):
    xd = x.data
    out = np.maximum(xd, xd.dtype.type(0))

    def backward_fn(g):
        return (g * (out > 0),)

    return make_result(out, (x,), backward_fn)


def hadamard(a, b):
    """Elementwise product of two identically shaped tensors (no broadcasting)."""
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward_fn(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return make_result(out, (a, b), backward_fn)


def add(a, b):
    _same_shape(a, b, "add")
    out = a.data + b.data

    def backward_fn(g):
        return g, g

    return make_result(out, (a, b), backward_fn)


def sum(x):  # noqa: A001 - mirrors numpy naming
    xd = x.data
    out = np.asarray(xd.sum(), dtype=xd.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g, xd.shape).astype(xd.dtype),)

    return make_result(out, (x,), backward_fn)


def flatten(x):
    """``(N, ...)`` to ``(N, F)``."""
    xd = x.data
    shape = xd.shape
    out = xd.reshape(shape[0], -1)

    def backward_fn(g):
        return (g.reshape(shape),)

    return make_result(out, (x,), backward_fn)


def linear(x, w, b=None):
    if x.ndim != 2:
        raise DimensionError(f"linear expects (N, F) input, got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"feature axis (1): weight {w.shape} incompatible with input {x.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        if b.shape != (wd.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match {wd.shape[0]} outputs")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        grads = (g @ wd, g.T @ xd)
        if b is None:
            return grads
        return grads + (g.sum(axis=0),)

    return make_result(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# normalization and loss


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the
    running estimates (numpy arrays, updated in place) move towards them.
    In eval mode the running estimates are used and must exist.
    """
    _check_rank4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"channel axis (1): affine parameters do not match {c} channels")
    xd = x.data
    dt = xd.dtype.type
    gd = gamma.data.astype(xd.dtype, copy=False)[None, :, None, None]
    bd = beta.data.astype(xd.dtype, copy=False)[None, :, None, None]
    if training:
        count = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        if running_mean is not None:
            unbiased = var * (count / (count - 1)) if count > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
        inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
        xhat = centered * inv_std[None, :, None, None]
        out = xhat * gd + bd

        def backward_fn(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gd
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv_std[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

        return make_result(out, (x, gamma, beta), backward_fn)

    if running_mean is None or running_var is None:
        raise StateError("batchnorm in eval mode needs populated running statistics")
    rm = running_mean.astype(xd.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(running_var.astype(xd.dtype, copy=False) + dt(eps))).astype(xd.dtype)
    xhat = (xd - rm[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gd + bd

    def eval_backward(g):
        return (g * gd * inv_std[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)))

    return make_result(out, (x, gamma, beta), eval_backward)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"batch axis (0): {labels.shape[0] if labels.ndim else 0} labels "
                             f"for {logits.shape[0]} rows")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError(f"labels must lie in [0, {k})")
    z = logits.data
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    nll = logsum - shifted[np.arange(n), labels]
    out = np.asarray(nll.mean(), dtype=z.dtype)

    def backward_fn(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p).astype(z.dtype, copy=False),

    return make_result(out, (logits,), backward_fn)


def constant(data, like=None):
    """A tensor that never requires gradients, optionally matching a dtype."""
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(data, dtype=dtype) if dtype is not None else data)
