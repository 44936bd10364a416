"""Differentiable primitives over NCHW tensors.

Every function takes and returns :class:`~dynunet.tensor.Tensor` objects and
records a backward closure. Convolutions are cross-correlations with zero
padding. Broadcasting is limited to what the layers need: scalars, per-channel
``[1, C, 1, 1]`` / ``[C]`` vectors and ``[N, C, 1, 1]`` gates.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _operands(a, b):
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    dtype = (a_t or b_t).dtype
    if a_t is None:
        a_t = Tensor(np.asarray(a, dtype=dtype))
    if b_t is None:
        b_t = Tensor(np.asarray(b, dtype=dtype))
    return a_t, b_t


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b, floor: float = 0.0) -> Tensor:
    """``a / max(b, floor)``; the floor only matters for denominators below it."""
    a, b = _operands(a, b)
    ad = a.data
    if floor:
        clamped = b.data < floor
        den = np.where(clamped, floor, b.data).astype(b.dtype)
    else:
        clamped, den = None, b.data
    out = ad / den

    def bw(g):
        ga = _unbroadcast(g / den, ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = -g * out / den
            if clamped is not None:
                gb = np.where(clamped, 0.0, gb).astype(gb.dtype)
            gb = _unbroadcast(gb, den.shape)
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_result(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)
    return make_result(out, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (base[0], base[2], base[3]):
            raise ValueError(f"concat_channels: shapes {[t.shape for t in tensors]} differ outside the channel axis")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return make_result(out, tensors, lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(np.ascontiguousarray(x.data[:, start:stop]), (x,), bw, "channel_slice")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# affine maps


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input {x.shape} incompatible with weight {weight.shape} (expected [N, {weight.shape[-1]}])"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        return g @ wd, g.T @ xd, (g.sum(0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, lambda g: bw(g)[: len(parents)], "linear")


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input extent {size + 2 * padding}")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, shape_p: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape_p[:2]
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros(shape_p, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[
                :, :, i, j
            ]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is ``[Cout, Cin, K, K]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ValueError(
            f"conv2d: weight expects {cin} input channels but input has {c} (input {x.shape}, weight {weight.shape})"
        )
    if k != k2:
        raise ValueError(f"conv2d: only square kernels are supported, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    wm = weight.data.reshape(cout, cin * k * k)
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c, h * w)
        xp_shape = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        xp_shape = xp.shape
        cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def bw(g):
        gm = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm)
            if xp_shape is None:
                gx = dcols.reshape(x.shape)
            else:
                gx = _col2im(dcols, xp_shape, k, stride, ho, wo)
                if padding:
                    gx = gx[:, :, padding : padding + h, padding : padding + w]
                gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, lambda g: bw(g)[: len(parents)], "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel == stride == 2. ``weight`` is ``[Cin, Cout, 2, 2]``.

    This is the adjoint of ``conv2d(., weight, stride=2)`` with the same weight
    array read as ``[Cout_conv, Cin_conv, 2, 2]``.
    """
    n, c, h, w = x.shape
    cin, cout, k, k2 = weight.shape
    if stride != 2 or k != 2 or k2 != 2:
        raise ValueError(f"conv_transpose2d supports only kernel=stride=2, got kernel {k}x{k2}, stride {stride}")
    if cin != c:
        raise ValueError(f"conv_transpose2d: weight expects {cin} input channels but input has {c}")
    wm = weight.data.reshape(cin, cout * 4)
    xm = x.data.reshape(n, c, h * w)
    # (n, hw, cout*4)
    y = np.matmul(xm.transpose(0, 2, 1), wm)
    out = y.reshape(n, h, w, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gm = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n, h * w, cout * 4)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(gm, wm.T).transpose(0, 2, 1).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xm, gm).sum(0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, lambda g: bw(g)[: len(parents)], "conv_transpose2d")


# ---------------------------------------------------------------------------
# pooling / resampling


def _pool_extent(size: int, k: int, stride: int) -> int:
    if size <= k:
        return 1
    return -(-(size - k) // stride) + 1


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Window mean. Inputs whose extent does not tile are padded on the
    right/bottom; padded cells are excluded from the window count."""
    if kernel <= 0:
        raise ValueError(f"avg_pool2d: kernel must be positive, got {kernel}")
    stride = kernel if stride is None else stride
    if stride <= 0:
        raise ValueError(f"avg_pool2d: stride must be positive, got {stride}")
    n, c, h, w = x.shape
    ho, wo = _pool_extent(h, kernel, stride), _pool_extent(w, kernel, stride)
    hp, wp = (ho - 1) * stride + kernel, (wo - 1) * stride + kernel
    ragged = (hp, wp) != (h, w)
    if not ragged and kernel == stride:
        out = x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

        def bw(g):
            gx = np.broadcast_to((g / (kernel * kernel))[:, :, :, None, :, None], (n, c, ho, kernel, wo, kernel))
            return (gx.reshape(x.shape),)

        return make_result(out, (x,), bw, "avg_pool2d")

    xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    xp[:, :, :h, :w] = x.data
    mask = np.zeros((hp, wp), dtype=x.dtype)
    mask[:h, :w] = 1
    acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
    count = np.zeros((ho, wo), dtype=x.dtype)
    sl = lambda i, e: slice(i, i + stride * (e - 1) + 1, stride)  # noqa: E731
    for i in range(kernel):
        for j in range(kernel):
            acc += xp[:, :, sl(i, ho), sl(j, wo)]
            count += mask[sl(i, ho), sl(j, wo)]
    out = acc / count

    def bw(g):
        gs = g / count
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, sl(i, ho), sl(j, wo)] += gs
        return (np.ascontiguousarray(gxp[:, :, :h, :w]),)

    return make_result(out, (x,), bw, "avg_pool2d")


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pool; extents must be divisible by ``kernel``."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"max_pool2d: extents {h}x{w} not divisible by {kernel}")
    ho, wo = h // kernel, w // kernel
    kk = kernel * kernel
    xr = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kk)
    idx = xr.argmax(axis=-1)[..., None]
    out = np.take_along_axis(xr, idx, axis=-1)[..., 0]

    def bw(g):
        gr = np.zeros((n, c, ho, wo, kk), dtype=g.dtype)
        np.put_along_axis(gr, idx, g[..., None], axis=-1)
        gx = gr.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return make_result(out, (x,), bw, "max_pool2d")


def adaptive_avg_pool_global(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``[N, C, H, W] -> [N, C, 1, 1]``."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "global_avg_pool")


def nearest_upsample(x: Tensor, scale: int, size: Optional[tuple] = None) -> Tensor:
    """Replicate each value into a ``scale x scale`` block, optionally cropping
    the result (top-left anchored) to ``size = (H, W)``."""
    if scale < 1:
        raise ValueError(f"nearest_upsample: scale must be >= 1, got {scale}")
    n, c, h, w = x.shape
    full = (h * scale, w * scale)
    th, tw = full if size is None else size
    if th > full[0] or tw > full[1]:
        raise ValueError(f"nearest_upsample: target {size} exceeds upsampled extent {full}")
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)[:, :, :th, :tw]

    def bw(g):
        gf = np.zeros((n, c) + full, dtype=g.dtype)
        gf[:, :, :th, :tw] = g
        return (gf.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "nearest_upsample")


# ---------------------------------------------------------------------------
# normalisation


def instance_norm(
    x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5
) -> Tensor:
    """Per-sample, per-channel spatial standardisation with optional affine."""
    n, c, h, w = x.shape
    m = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gamma = weight.data.reshape(1, c, 1, 1) if weight is not None else None
    out = xhat * gamma if gamma is not None else xhat
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            dxh = g * gamma if gamma is not None else g
            gx = inv * (
                dxh - dxh.mean(axis=(2, 3), keepdims=True) - xhat * (dxh * xhat).sum(axis=(2, 3), keepdims=True) / m
            )
        if weight is not None and weight.requires_grad:
            gw = (g * xhat).sum(axis=(0, 2, 3)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return gx, gw, gb

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)

    def bw_select(g):
        gx, gw, gb = bw(g)
        res = [gx]
        if weight is not None:
            res.append(gw)
        if bias is not None:
            res.append(gb)
        return res

    return make_result(out, parents, bw_select, "instance_norm")
