"""Neural-net primitives on top of the autograd tensors.

Convolutions use "same"-style padding of floor((k-1)*dilation/2) per side,
so a stride-s op maps spatial size H to ceil(H/s).  All convs are bias-free
(normalization follows them in the candidate blocks); the prediction head
gets its own per-channel bias op.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, TensorError, _accum, _make


def conv_out_size(size: int, stride: int) -> int:
    return -(-size // stride)  # ceil division


def _same_pad(k: int, dilation: int) -> int:
    return (k - 1) * dilation // 2


def _conv_window(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw) strided view over the padded input
    keh = dilation * (kh - 1) + 1
    kew = dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (keh, kew), axis=(2, 3))
    return v[:, :, ::stride, ::stride, ::dilation, ::dilation]


def _scatter_cols(gxp: np.ndarray, gcols: np.ndarray, stride: int, dilation: int) -> None:
    # gcols: (B, Ho, Wo, C, kh, kw) -> accumulate into padded-input gradient.
    # Slices for a fixed (i, j) never overlap, so plain += is safe.
    _, ho, wo, _, kh, kw = gcols.shape
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i * dilation : i * dilation + stride * ho : stride,
                j * dilation : j * dilation + stride * wo : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D convolution, NCHW input, weight (out_ch, in_ch/groups, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise TensorError(f"conv2d expects 4-D input and weight, got {x.data.shape} and {w.data.shape}")
    if stride < 1 or dilation < 1 or groups < 1:
        raise TensorError("conv2d stride/dilation/groups must be positive")
    b, c, h, wd = x.data.shape
    co, cig, kh, kw = w.data.shape
    if c != cig * groups or co % groups != 0:
        raise TensorError(
            f"conv2d channel mismatch: input {x.data.shape}, weight {w.data.shape}, groups {groups}"
        )
    if h < 1 or wd < 1:
        raise TensorError(f"conv2d on zero-size spatial input {x.data.shape}")
    ph, pw = _same_pad(kh, dilation), _same_pad(kw, dilation)
    ho, wo = conv_out_size(h, stride), conv_out_size(wd, stride)
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d output would be zero-size for input {x.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    v = _conv_window(xp, kh, kw, stride, dilation)

    if groups == 1:
        wmat = w.data.reshape(co, c * kh * kw)
        cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)
        out = (cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)

        def backward(g):
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, co)
            if w.requires_grad:
                # recompute the column matrix instead of keeping it alive
                xp2 = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                v2 = _conv_window(xp2, kh, kw, stride, dilation)
                cols2 = np.ascontiguousarray(v2.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)
                _accum(w, (gmat.T @ cols2).reshape(w.data.shape))
            if x.requires_grad:
                gcols = (gmat @ wmat).reshape(b, ho, wo, c, kh, kw)
                gxp = np.zeros_like(xp)
                _scatter_cols(gxp, gcols, stride, dilation)
                _accum(x, gxp[:, :, ph : ph + h, pw : pw + wd])

        return _make(np.ascontiguousarray(out), (x, w), backward, "conv2d")

    if groups == c and co == c and cig == 1:
        # depthwise
        wk = w.data[:, 0]  # (C, kh, kw)
        out = np.einsum("bchwij,cij->bchw", v, wk, optimize=True)

        def backward(g):
            if w.requires_grad:
                xp2 = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                v2 = _conv_window(xp2, kh, kw, stride, dilation)
                gw = np.einsum("bchw,bchwij->cij", g, v2, optimize=True)
                _accum(w, gw[:, None])
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i * dilation : i * dilation + stride * ho : stride,
                            j * dilation : j * dilation + stride * wo : stride] += g * wk[None, :, i, j, None, None]
                _accum(x, gxp[:, :, ph : ph + h, pw : pw + wd])

        return _make(np.ascontiguousarray(out), (x, w), backward, "conv2d_dw")

    # general grouped conv: per-group column matmul (rarely used)
    cpg, opg = c // groups, co // groups
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c, kh * kw)
    out = np.empty((b * ho * wo, co))
    for gidx in range(groups):
        wg = w.data[gidx * opg : (gidx + 1) * opg].reshape(opg, cpg * kh * kw)
        cg = cols[:, gidx * cpg : (gidx + 1) * cpg].reshape(b * ho * wo, cpg * kh * kw)
        out[:, gidx * opg : (gidx + 1) * opg] = cg @ wg.T
    out = out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, co)
        xp2 = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        v2 = _conv_window(xp2, kh, kw, stride, dilation)
        cols2 = np.ascontiguousarray(v2.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c, kh * kw)
        gcols = np.zeros_like(cols2)
        gw = np.zeros_like(w.data)
        for gidx in range(groups):
            wg = w.data[gidx * opg : (gidx + 1) * opg].reshape(opg, cpg * kh * kw)
            cg = cols2[:, gidx * cpg : (gidx + 1) * cpg].reshape(b * ho * wo, cpg * kh * kw)
            gm = gmat[:, gidx * opg : (gidx + 1) * opg]
            gw[gidx * opg : (gidx + 1) * opg] = (gm.T @ cg).reshape(opg, cpg, kh, kw)
            gcols[:, gidx * cpg : (gidx + 1) * cpg] = (gm @ wg).reshape(b * ho * wo, cpg, kh * kw)
        if w.requires_grad:
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            _scatter_cols(gxp, gcols.reshape(b, ho, wo, c, kh, kw), stride, dilation)
            _accum(x, gxp[:, :, ph : ph + h, pw : pw + wd])

    return _make(np.ascontiguousarray(out), (x, w), backward, "conv2d_grouped")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 4 or bias.data.ndim != 1 or bias.data.shape[0] != x.data.shape[1]:
        raise TensorError(f"add_channel_bias mismatch: {x.data.shape} vs {bias.data.shape}")

    def backward(g):
        _accum(x, g)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _make(x.data + bias.data[None, :, None, None], (x, bias), backward, "add_channel_bias")


def max_pool3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 max pooling with same padding.

    Backward routes gradient to the argmax position of each window; ties
    resolve to the lowest flat (row-major) index within the window.
    """
    if x.data.ndim != 4:
        raise TensorError(f"max_pool3 expects a 4-D tensor, got {x.data.shape}")
    if stride < 1:
        raise TensorError("max_pool3 stride must be positive")
    b, c, h, w = x.data.shape
    if h < 1 or w < 1:
        raise TensorError(f"max_pool3 on zero-size spatial input {x.data.shape}")
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    v = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = v.reshape(b, c, ho, wo, 9)
    arg = np.argmax(flat, axis=-1)  # first occurrence = lowest flat index
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        gxp = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
        bi, ci, oi, oj = np.indices((b, c, ho, wo), sparse=False)
        py = oi * stride + arg // 3
        px = oj * stride + arg % 3
        np.add.at(gxp, (bi, ci, py, px), g)
        _accum(x, gxp[:, :, 1 : 1 + h, 1 : 1 + w])

    return _make(np.ascontiguousarray(out), (x,), backward, "max_pool3")


def _linear_coeffs(n_out: int, n_in: int):
    # half-pixel-center mapping of output coords into input coords
    src = (np.arange(n_out) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Doubles both spatial dims with separable linear interpolation."""
    if x.data.ndim != 4:
        raise TensorError(f"bilinear_upsample2x expects a 4-D tensor, got {x.data.shape}")
    b, c, h, w = x.data.shape
    ry0, ry1, fy = _linear_coeffs(2 * h, h)
    cx0, cx1, fx = _linear_coeffs(2 * w, w)
    rows = x.data[:, :, ry0, :] * (1 - fy)[None, None, :, None] + x.data[:, :, ry1, :] * fy[None, None, :, None]
    out = rows[:, :, :, cx0] * (1 - fx)[None, None, None, :] + rows[:, :, :, cx1] * fx[None, None, None, :]

    def backward(g):
        if not x.requires_grad:
            return
        grows = np.zeros((b, c, 2 * h, w), dtype=np.float64)
        np.add.at(grows, (slice(None), slice(None), slice(None), cx0), g * (1 - fx)[None, None, None, :])
        np.add.at(grows, (slice(None), slice(None), slice(None), cx1), g * fx[None, None, None, :])
        gx = np.zeros((b, c, h, w), dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None), ry0), grows * (1 - fy)[None, None, :, None])
        np.add.at(gx, (slice(None), slice(None), ry1), grows * fy[None, None, :, None])
        _accum(x, gx)

    return _make(np.ascontiguousarray(out), (x,), backward, "bilinear_upsample2x")


def upsample_to(x: Tensor, height: int, width: int) -> Tensor:
    """Repeated x2 upsampling followed by a crop to the exact target size."""
    from .tensor import crop_hw

    out = x
    while out.data.shape[2] < height or out.data.shape[3] < width:
        out = bilinear_upsample2x(out)
    if out.data.shape[2] < height or out.data.shape[3] < width:
        raise TensorError(f"cannot upsample {x.data.shape} to {(height, width)}")
    return crop_hw(out, height, width)


def channel_norm_train(x: Tensor, gamma: Tensor, beta: Tensor,
                       running_mean: np.ndarray, running_var: np.ndarray,
                       momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalization over (batch, H, W), training mode.

    Updates the running buffers in place (biased variance).
    """
    if x.data.ndim != 4:
        raise TensorError(f"channel_norm expects a 4-D tensor, got {x.data.shape}")
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var

    def backward(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            gm = g.mean(axis=(0, 2, 3))
            gxm = (g * xhat).sum(axis=(0, 2, 3)) / n
            dx = (gamma.data * inv)[None, :, None, None] * (
                g - gm[None, :, None, None] - xhat * gxm[None, :, None, None]
            )
            _accum(x, dx)

    return _make(out, (x, gamma, beta), backward, "channel_norm_train")


def channel_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      eps: float = 1e-5) -> Tensor:
    """Normalization with frozen running statistics (eval / derived mode)."""
    if x.data.ndim != 4:
        raise TensorError(f"channel_norm expects a 4-D tensor, got {x.data.shape}")
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, g * (gamma.data * inv)[None, :, None, None])

    return _make(out, (x, gamma, beta), backward, "channel_norm_eval")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean per-pixel negative log-softmax at the true class.

    labels: integer array (B, H, W); entries must be valid classes or equal
    ignore_index.  Raises if every pixel is ignored.
    """
    if logits.data.ndim != 4:
        raise TensorError(f"cross_entropy expects 4-D logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    b, c, h, w = logits.data.shape
    if labels.shape != (b, h, w):
        raise TensorError(f"cross_entropy label shape {labels.shape} does not match logits {logits.data.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= c):
        raise TensorError(
            f"cross_entropy label out of range [0, {c}) : min={checked.min() if checked.size else None}, "
            f"max={checked.max() if checked.size else None}"
        )
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise TensorError("cross_entropy: all pixels ignored")

    zmax = logits.data.max(axis=1, keepdims=True)
    ez = np.exp(logits.data - zmax)
    lse = np.log(ez.sum(axis=1, keepdims=True)) + zmax  # (B,1,H,W)
    safe_labels = np.where(valid, labels, 0)
    lt = np.take_along_axis(logits.data, safe_labels[:, None], axis=1)[:, 0]
    loss = float(np.sum((lse[:, 0] - lt)[valid]) / n_valid)

    def backward(g):
        if not logits.requires_grad:
            return
        p = ez / ez.sum(axis=1, keepdims=True)
        np.subtract.at(p, (np.arange(b)[:, None, None], safe_labels,
                           np.arange(h)[None, :, None], np.arange(w)[None, None, :]), 1.0)
        p *= valid[:, None] / n_valid
        _accum(logits, p * float(g))

    return _make(np.float64(loss), (logits,), backward, "cross_entropy")
