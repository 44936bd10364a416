"""Bilinear sampling and modulated deformable convolution.

Sampling is expressed as a sparse interpolation matrix ``S`` with four
entries per sampled point (one per integer neighbour, zero weight when the
neighbour falls outside the map). The forward gather is ``S @ x`` and the
input gradient is exactly ``S.T @ grad``. Two companion matrices holding the
partial derivatives of the bilinear weights give the offset gradients.

Offset channels are ordered ``(dy_0, dx_0, dy_1, dx_1, ...)`` with taps in
row-major kernel order; mask channels hold one logit per tap.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, make_result


def bilinear_sample(fmap: np.ndarray, y: float, x: float) -> np.ndarray:
    """Interpolate a ``[C, H, W]`` map at real coordinates ``(y, x)``.

    Neighbours outside ``[0, H) x [0, W)`` contribute zero.
    """
    fmap = np.asarray(fmap)
    c, h, w = fmap.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    ly, lx = y - y0, x - x0
    out = np.zeros(c, dtype=np.result_type(fmap.dtype, np.float64))
    for yy, xx, wt in (
        (y0, x0, (1 - ly) * (1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx),
        (y0 + 1, x0, ly * (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ):
        if 0 <= yy < h and 0 <= xx < w and wt != 0:
            out += wt * fmap[:, yy, xx]
    return out


def _sampling_matrices(ys: np.ndarray, xs: np.ndarray, n: int, h: int, w: int, need_grad: bool):
    """Sparse interpolation matrix for sample points ``ys, xs`` of shape ``[N, R]``.

    Returns ``S`` and, when ``need_grad``, ``dS/dy`` and ``dS/dx``; each is
    ``[N*R, N*H*W]`` in CSR form.
    """
    dtype = ys.dtype
    r = ys.shape[1]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ly = ys - y0
    lx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    hy, hx = 1.0 - ly, 1.0 - lx

    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
    base = (np.arange(n, dtype=np.int64) * (h * w))[:, None, None]
    cols = base + np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
    cols = cols.reshape(-1)
    indptr = np.arange(0, 4 * n * r + 1, 4, dtype=np.int64)
    shape = (n * r, n * h * w)
    vmask = valid.astype(dtype)

    def build(weights):
        data = (np.stack(weights, axis=-1) * vmask).reshape(-1)
        return sp.csr_matrix((data, cols, indptr), shape=shape)

    s = build([hy * hx, hy * lx, ly * hx, ly * lx])
    if not need_grad:
        return s, None, None
    sy = build([-hx, -lx, hx, lx])
    sx = build([-hy, hy, -ly, ly])
    return s, sy, sx


def modulated_deform_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    offsets: Tensor,
    mask: Optional[Tensor] = None,
    stride: int = 1,
    padding: Optional[int] = None,
) -> Tensor:
    """Modulated deformable convolution.

    ``out(p) = sum_k w_k * sigmoid(m_k(p)) * x(p + p_k + offset_k(p))`` summed
    over input channels. ``mask`` holds logits; pass ``None`` to use a unit
    modulation (every tap weighted by exactly 1).
    """
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c or k != k2:
        raise ValueError(f"deform conv: weight {weight.shape} incompatible with input {x.shape}")
    kk = k * k
    pad = (k - 1) // 2 if padding is None else padding
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if offsets.ndim != 4 or offsets.shape[1] != 2 * kk:
        raise ValueError(f"deform conv: offsets need {2 * kk} channels (2*K^2 for K={k}), got shape {offsets.shape}")
    if offsets.shape[0] != n or offsets.shape[2:] != (ho, wo):
        raise ValueError(f"deform conv: offsets shape {offsets.shape} must be [{n}, {2 * kk}, {ho}, {wo}]")
    if mask is not None:
        if mask.ndim != 4 or mask.shape[1] != kk:
            raise ValueError(f"deform conv: mask needs {kk} channels (K^2 for K={k}), got shape {mask.shape}")
        if mask.shape[0] != n or mask.shape[2:] != (ho, wo):
            raise ValueError(f"deform conv: mask shape {mask.shape} must be [{n}, {kk}, {ho}, {wo}]")

    dtype = x.dtype
    hw_o = ho * wo
    # regular grid positions per tap, [K^2, Ho, Wo]
    ky, kx = np.divmod(np.arange(kk), k)
    gy = (np.arange(ho) * stride - pad)[None, :, None] + ky[:, None, None]
    gx = (np.arange(wo) * stride - pad)[None, None, :] + kx[:, None, None]
    off = offsets.data.reshape(n, kk, 2, ho, wo)
    ys = (gy[None] + off[:, :, 0]).astype(dtype)
    xs = (gx[None] + off[:, :, 1]).astype(dtype)
    # rows ordered (n, i, j, tap)
    ys_r = ys.transpose(0, 2, 3, 1).reshape(n, hw_o * kk)
    xs_r = xs.transpose(0, 2, 3, 1).reshape(n, hw_o * kk)
    need_offset_grad = offsets.requires_grad
    s, sy, sx = _sampling_matrices(ys_r, xs_r, n, h, w, need_offset_grad)

    x_t = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    sampled = np.asarray(s @ x_t).reshape(n, hw_o, kk, c)
    if mask is not None:
        m = 0.5 * (1.0 + np.tanh(0.5 * mask.data))
        m_r = m.transpose(0, 2, 3, 1).reshape(n, hw_o, kk, 1)
        cols = sampled * m_r
    else:
        cols = sampled
    wm = weight.data.reshape(cout, c, kk).transpose(0, 2, 1).reshape(cout, kk * c)
    cols2 = cols.reshape(n, hw_o, kk * c)
    out = np.matmul(cols2, wm.T)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, cout, ho, wo)

    def bw(g):
        gt = g.reshape(n, cout, hw_o).transpose(0, 2, 1)
        gx = gw = gb = goff = gmask = None
        dcols = np.matmul(gt, wm).reshape(n, hw_o, kk, c)
        if weight.requires_grad:
            gwm = np.matmul(gt.transpose(0, 2, 1), cols2).sum(0)
            gw = gwm.reshape(cout, kk, c).transpose(0, 2, 1).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if mask is not None and mask.requires_grad:
            geff = (dcols * sampled).sum(-1) * (m_r[..., 0] * (1.0 - m_r[..., 0]))
            gmask = np.ascontiguousarray(geff.reshape(n, ho, wo, kk).transpose(0, 3, 1, 2))
        dsamp = dcols * m_r if mask is not None else dcols
        dsamp_flat = dsamp.reshape(n * hw_o * kk, c)
        if x.requires_grad:
            gxt = np.asarray(s.T @ dsamp_flat).reshape(n, h, w, c)
            gx = np.ascontiguousarray(gxt.transpose(0, 3, 1, 2))
        if need_offset_grad:
            dy = (np.asarray(sy @ x_t) * dsamp_flat).sum(-1).reshape(n, ho, wo, kk)
            dx = (np.asarray(sx @ x_t) * dsamp_flat).sum(-1).reshape(n, ho, wo, kk)
            goff = np.stack([dy, dx], axis=-1).reshape(n, ho, wo, 2 * kk).transpose(0, 3, 1, 2)
            goff = np.ascontiguousarray(goff).astype(dtype, copy=False)
        res = [gx, gw]
        if bias is not None:
            res.append(gb)
        res.append(goff)
        if mask is not None:
            res.append(gmask)
        return res

    parents = [x, weight]
    if bias is not None:
        parents.append(bias)
    parents.append(offsets)
    if mask is not None:
        parents.append(mask)
    return make_result(out, parents, bw, "modulated_deform_conv2d")
