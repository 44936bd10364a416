"""Encoder-decoder assembly for the six architecture variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import functional as F
from .calib import DCC, DCD, DCU
from .io import read_tensor, write_tensor
from .nn import Conv2d, ConvTranspose2d, DoubleConv, MaxPool2d, Module, ModuleList, StridedConvDown
from .tensor import Tensor, default_dtype, precision

VARIANTS = ("unet", "sconv_unet", "dcc_unet", "dcd_unet", "dcu_unet", "dynamic_unet")

FULL_CHANNELS = (32, 64, 128, 256, 512, 512)


@dataclass
class ArchitectureConfig:
    variant: str = "dynamic_unet"
    in_channels: int = 1
    num_classes: int = 2
    channels: tuple = FULL_CHANNELS
    # None: the deepest entry of ``channels`` is the bottleneck. An int adds
    # one more resolution level of that width below the listed ones.
    bottleneck: Optional[int] = None
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError(f"channels must be a non-empty list of positive ints, got {self.channels}")
        if self.bottleneck is not None and self.bottleneck <= 0:
            raise ValueError(f"bottleneck must be positive, got {self.bottleneck}")
        if self.in_channels <= 0 or self.num_classes < 2:
            raise ValueError("in_channels must be >= 1 and num_classes >= 2")

    @property
    def widths(self) -> tuple:
        if self.bottleneck is None:
            return self.channels
        return self.channels + (self.bottleneck,)

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def uses_dcc(self) -> bool:
        return self.variant in ("dcc_unet", "dynamic_unet")

    @property
    def uses_dcd(self) -> bool:
        return self.variant in ("dcd_unet", "dynamic_unet")

    @property
    def uses_dcu(self) -> bool:
        return self.variant in ("dcu_unet", "dynamic_unet")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def desk_config(variant: str, num_classes: int = 6, levels: int = 3) -> ArchitectureConfig:
    """Shrunk channel plan used for CPU-scale experiments."""
    return ArchitectureConfig(variant=variant, num_classes=num_classes, channels=FULL_CHANNELS[:levels])


class UNet(Module):
    """Shared skeleton; ``config.variant`` picks the block, down and up modules.

    Decoder stages concatenate ``[upsampled-or-aligned, skip]`` in that order.
    """

    def __init__(self, config: ArchitectureConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.step = 0
        rng = np.random.default_rng(seed)
        slope = config.leaky_slope
        widths = config.widths

        def block(cin, cout):
            return DCC(cin, cout, rng, slope=slope) if config.uses_dcc else DoubleConv(cin, cout, rng, slope=slope)

        enc, downs = [], []
        cin = config.in_channels
        for i, w in enumerate(widths):
            enc.append(block(cin, w))
            if i < len(widths) - 1:
                if config.uses_dcd:
                    downs.append(DCD(w, rng, slope=slope))
                elif config.variant == "sconv_unet":
                    downs.append(StridedConvDown(w, rng, slope=slope))
                else:
                    downs.append(MaxPool2d())
            cin = w
        self.encoder = ModuleList(enc)
        self.downs = ModuleList(downs)

        ups, dec = [], []
        for i in range(len(widths) - 2, -1, -1):
            if config.uses_dcu:
                ups.append(DCU(widths[i + 1], widths[i], rng, slope=slope))
            else:
                ups.append(ConvTranspose2d(widths[i + 1], widths[i], rng, slope=slope))
            dec.append(block(2 * widths[i], widths[i]))
        self.ups = ModuleList(ups)
        self.decoder = ModuleList(dec)
        self.head = Conv2d(widths[0], config.num_classes, 1, rng, slope=slope)

    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"network expects [N, {cfg.in_channels}, H, W] input, got {x.shape}")
        h, w = x.shape[2:]
        if h % cfg.divisor or w % cfg.divisor:
            raise ValueError(
                f"input extents {h}x{w} must be multiples of {cfg.divisor} for {cfg.levels} resolution levels"
            )

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        self.check_input(x)
        skips = []
        h = x
        for i, enc in enumerate(self.encoder):
            h = enc(h)
            if i < len(self.downs):
                skips.append(h)
                h = self.downs[i](h)
        if trace is not None:
            trace["bottleneck"] = h
        for up, dec in zip(self.ups, self.decoder):
            skip = skips.pop()
            u = up(h, skip) if isinstance(up, DCU) else up(h)
            h = dec(F.concat_channels([u, skip]))
        return self.head(h)


# A network instance carries its own parameters, seed and step counter.
NetworkState = UNet


def build_network(config: ArchitectureConfig, seed: int = 0, dtype=None) -> UNet:
    """Construct ``config.variant`` with parameters drawn deterministically from ``seed``."""
    config.validate()
    with precision(dtype or default_dtype()):
        return UNet(config, seed)


def parameter_table(net: Module) -> list:
    return [{"name": k, "shape": list(p.shape)} for k, p in net.named_parameters()]


def save_checkpoint(net: UNet, directory, extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one DUT1 file per parameter tensor."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    table = []
    for i, (name, p) in enumerate(net.named_parameters()):
        fname = f"tensors/{i:04d}.dut1"
        write_tensor(directory / fname, p.data)
        table.append({"name": name, "shape": list(p.shape), "file": fname})
    manifest = {
        "format": "dynunet-checkpoint/1",
        "config": net.config.to_dict(),
        "seed": net.seed,
        "step": net.step,
        "dtype": str(net.parameters()[0].dtype),
        "parameters": table,
    }
    if extra:
        manifest.update(extra)
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(directory / "manifest.json")
    return directory


def load_checkpoint(directory) -> UNet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ArchitectureConfig.from_dict(manifest["config"])
    net = build_network(config, manifest["seed"], dtype=np.dtype(manifest["dtype"]))
    state = {}
    for entry in manifest["parameters"]:
        arr = read_tensor(directory / entry["file"])
        state[entry["name"]] = arr.reshape(entry["shape"])
    net.load_state_dict(state)
    net.step = manifest["step"]
    return net
