"""Dynamic calibration layers: convolution (DCC), downsampling (DCD) and
upsampling (DCU).

Each ``forward`` accepts an optional ``trace`` dict that, when given, is filled
with the named intermediate maps. Tests use it to inspect gate ranges.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import functional as F
from .deform import modulated_deform_conv2d
from .nn import Conv2d, ConvTranspose2d, InstanceNorm2d, Linear, Module, Parameter, _normal, kaiming_std
from .tensor import Tensor, default_dtype

REGION_POOL = 4
DEFORM_K = 3
OFFSET_CHANNELS = 3 * DEFORM_K * DEFORM_K  # 18 offsets + 9 modulation logits
DCD_EPS = 1e-8


class DeformConv2d(Module):
    """Weights of a 3x3 modulated deformable conv; offsets come from outside."""

    def __init__(self, cin, cout, rng, slope=0.01, bias=True):
        k = DEFORM_K
        self.weight = Parameter(_normal(rng, (cout, cin, k, k), kaiming_std(cin * k * k, slope)))
        self.bias = Parameter(np.zeros(cout, dtype=default_dtype())) if bias else None

    def forward(self, x, offset_out: Tensor, unit_mask: bool = False):
        kk = DEFORM_K * DEFORM_K
        offsets = F.channel_slice(offset_out, 0, 2 * kk)
        mask = None if unit_mask else F.channel_slice(offset_out, 2 * kk, 3 * kk)
        return modulated_deform_conv2d(x, self.weight, self.bias, offsets, mask)


class DCC(Module):
    """Dynamically calibrated convolution block, ``Cin -> Cout`` at fixed extent.

    A pixel path (1x1 conv) and a region path (4x4 mean pool, 3x3 conv,
    nearest upsample) are summed and squashed into a spatial gate for the local
    3x3 features; a second 3x3 conv follows and its output is rescaled per
    channel by a pooled linear-sigmoid gate.
    """

    def __init__(self, cin, cout, rng, slope=0.01):
        self.cin, self.cout, self.slope = cin, cout, slope
        self.conv_pixel = Conv2d(cin, cout, 1, rng, slope=slope)
        self.conv_region = Conv2d(cin, cout, 3, rng, slope=slope)
        self.conv_local = Conv2d(cin, cout, 3, rng, bias=False, slope=slope)
        self.norm_local = InstanceNorm2d(cout)
        self.conv_second = Conv2d(cout, cout, 3, rng, bias=False, slope=slope)
        self.norm_second = InstanceNorm2d(cout)
        self.channel_linear = Linear(cout, cout, rng, slope=slope)

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ValueError(f"DCC expects [N, {self.cin}, H, W] input, got {x.shape}")
        n, _, h, w = x.shape
        t_p = self.conv_pixel(x)
        region = self.conv_region(F.avg_pool2d(x, REGION_POOL, REGION_POOL))
        t_r = F.nearest_upsample(region, REGION_POOL, size=(h, w))
        t_s = F.sigmoid(F.add(t_p, t_r))
        local = F.leaky_relu(self.norm_local(self.conv_local(x)), self.slope)
        f1 = F.mul(local, t_s)
        f2 = F.leaky_relu(self.norm_second(self.conv_second(f1)), self.slope)
        pooled = F.reshape(F.adaptive_avg_pool_global(f2), (n, self.cout))
        chan = F.reshape(F.sigmoid(self.channel_linear(pooled)), (n, self.cout, 1, 1))
        out = F.mul(chan, f2)
        if trace is not None:
            trace.update(t_p=t_p, t_r=t_r, t_s=t_s, f1=f1, f2=f2, channel_scale=chan, out=out)
        return out


class DCD(Module):
    """Dynamically calibrated 2x downsampling.

    A positive allocation map ``M = exp(sigmoid(deform_conv(f)))`` weights each
    pixel; every 2x2 window is reduced to ``mean(M * f) / mean(M)``.
    """

    def __init__(self, channels, rng, slope=0.01):
        self.channels = channels
        self.unit_mask = False
        self.conv_offset = Conv2d(channels, OFFSET_CHANNELS, DEFORM_K, rng, zero_init=True)
        self.deform = DeformConv2d(channels, channels, rng, slope=slope)

    def forward(self, f: Tensor, trace: Optional[dict] = None) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ValueError(f"DCD expects [N, {self.channels}, H, W] input, got {f.shape}")
        h, w = f.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"DCD needs even spatial extents, got {h}x{w}")
        offset_out = self.conv_offset(f)
        logits = self.deform(f, offset_out, unit_mask=self.unit_mask)
        m = F.exp(F.sigmoid(logits))
        num = F.avg_pool2d(F.mul(m, f), 2, 2)
        den = F.avg_pool2d(m, 2, 2)
        out = F.div(num, den, floor=DCD_EPS)
        if trace is not None:
            trace.update(offsets=offset_out, allocation=m, out=out)
        return out


class DCU(Module):
    """Dynamically calibrated 2x upsampling.

    Upsamples with a transposed conv, predicts offsets and modulation from the
    concatenation of the upsampled map and its skip reference, realigns the
    upsampled map with a deformable conv and applies leaky ReLU. The caller
    concatenates the result with the skip map.
    """

    def __init__(self, cin, cout, rng, slope=0.01):
        self.cin, self.cout, self.slope = cin, cout, slope
        self.unit_mask = False
        self.up = ConvTranspose2d(cin, cout, rng, slope=slope)
        self.conv_offset = Conv2d(2 * cout, OFFSET_CHANNELS, DEFORM_K, rng, zero_init=True)
        self.deform = DeformConv2d(cout, cout, rng, slope=slope)

    def forward(self, f_up_src: Tensor, skip: Tensor, trace: Optional[dict] = None) -> Tensor:
        if f_up_src.ndim != 4 or f_up_src.shape[1] != self.cin:
            raise ValueError(f"DCU expects [N, {self.cin}, h, w] decoder input, got {f_up_src.shape}")
        n, _, h, w = f_up_src.shape
        want = (n, self.cout, 2 * h, 2 * w)
        if skip.shape != want:
            raise ValueError(f"DCU: skip shape {skip.shape} must be {want} for decoder input {f_up_src.shape}")
        f_i = self.up(f_up_src)
        offset_out = self.conv_offset(F.concat_channels([f_i, skip]))
        aligned = self.deform(f_i, offset_out, unit_mask=self.unit_mask)
        out = F.leaky_relu(aligned, self.slope)
        if trace is not None:
            trace.update(f_i=f_i, offsets=offset_out, out=out)
        return out
