"""Slow, literal numpy re-evaluation of the calibrated network.

Nothing here calls into the library's kernels: convolutions are tap loops,
sampling is scalar bilinear interpolation, and every gate is written out in
the order the layer definitions compose them. Only parameter arrays are read from the
modules.
"""

import numpy as np


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def lrelu(x, slope=0.01):
    return np.where(x > 0, x, slope * x)


def conv(x, w, b=None, stride=1):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    xp[:, :, p : p + h, p : p + wd] = x
    ho, wo = (h + 2 * p - k) // stride + 1, (wd + 2 * p - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], patch)
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv_transpose(x, w, b):
    n, _, h, wd = x.shape
    out = np.zeros((n, w.shape[1], 2 * h, 2 * wd))
    for a in range(2):
        for c in range(2):
            out[:, :, a::2, c::2] = np.einsum("io,nihw->nohw", w[:, :, a, c], x)
    return out + b[None, :, None, None]


def inorm(x, g, b, eps=1e-5):
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g[None, :, None, None] + b[None, :, None, None]


def avgpool(x, k):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def bilinear(fmap, y, x):
    c, h, w = fmap.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    val = np.zeros(c)
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < h and 0 <= xx < w:
                val += (1 - abs(y - yy)) * (1 - abs(x - xx)) * fmap[:, yy, xx]
    return val


def deform(x, w, b, off, mask_logits=None):
    n, c, h, wd = x.shape
    co = w.shape[0]
    out = np.zeros((n, co, h, wd))
    for s in range(n):
        for i in range(h):
            for j in range(wd):
                acc = b.copy() if b is not None else np.zeros(co)
                for t in range(9):
                    ky, kx = divmod(t, 3)
                    y = i + ky - 1 + off[s, 2 * t, i, j]
                    xx = j + kx - 1 + off[s, 2 * t + 1, i, j]
                    m = 1.0 if mask_logits is None else sig(mask_logits[s, t, i, j])
                    acc += m * (w[:, :, ky, kx] @ bilinear(x[s], y, xx))
                out[s, :, i, j] = acc
    return out


def dcc(layer, x):
    h, w = x.shape[2:]
    t_p = conv(x, layer.conv_pixel.weight.data, layer.conv_pixel.bias.data)
    region = conv(avgpool(x, 4), layer.conv_region.weight.data, layer.conv_region.bias.data)
    t_r = np.repeat(np.repeat(region, 4, axis=2), 4, axis=3)[:, :, :h, :w]
    t_s = sig(t_p + t_r)
    local = lrelu(
        inorm(conv(x, layer.conv_local.weight.data), layer.norm_local.weight.data, layer.norm_local.bias.data)
    )
    f1 = local * t_s
    f2 = lrelu(
        inorm(conv(f1, layer.conv_second.weight.data), layer.norm_second.weight.data, layer.norm_second.bias.data)
    )
    pooled = f2.mean(axis=(2, 3))
    chan = sig(pooled @ layer.channel_linear.weight.data.T + layer.channel_linear.bias.data)
    return chan[:, :, None, None] * f2


def dcd(layer, f):
    d = conv(f, layer.conv_offset.weight.data, layer.conv_offset.bias.data)
    logits = deform(f, layer.deform.weight.data, layer.deform.bias.data, d[:, :18], d[:, 18:])
    m = np.exp(sig(logits))
    return avgpool(m * f, 2) / np.maximum(avgpool(m, 2), 1e-8)


def dcu(layer, src, skip):
    f_i = conv_transpose(src, layer.up.weight.data, layer.up.bias.data)
    d = conv(np.concatenate([f_i, skip], axis=1), layer.conv_offset.weight.data, layer.conv_offset.bias.data)
    return lrelu(deform(f_i, layer.deform.weight.data, layer.deform.bias.data, d[:, :18], d[:, 18:]))


def dynamic_unet(net, x):
    skips = []
    h = x
    for i, enc in enumerate(net.encoder):
        h = dcc(enc, h)
        if i < len(net.downs):
            skips.append(h)
            h = dcd(net.downs[i], h)
    for up, dec in zip(net.ups, net.decoder):
        skip = skips.pop()
        h = dcc(dec, np.concatenate([dcu(up, h, skip), skip], axis=1))
    return conv(h, net.head.weight.data, net.head.bias.data)
