"""3D U-Net baseline with a configurable convolution depth per level."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..volgrid import DimensionError, Tensor, concat_channels, no_tape, upsample_trilinear
from .hrnet import ConfigError
from .layers import Conv3d, ConvBN, Module, ModuleList


@dataclass
class UNet3DConfig:
    base_width: int = 8
    depth_multiplier: float = 1.5
    levels: int = 3
    in_modalities: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.depth_multiplier <= 0:
            raise ConfigError("depth_multiplier must be positive")
        if self.in_modalities not in (1, 2, 3):
            raise ConfigError(f"in_modalities must be 1, 2 or 3, got {self.in_modalities}")

    @property
    def convs_per_level(self) -> int:
        # The original U-Net uses two convs per level; the multiplier scales that.
        return max(1, int(round(2 * self.depth_multiplier)))

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvStack(Module):
    def __init__(self, cin, cout, n, rng):
        super().__init__()
        self.layers = ModuleList(ConvBN(cin if i == 0 else cout, cout, rng=rng) for i in range(n))

    def __call__(self, x, train):
        for layer in self.layers:
            x = layer(x, train)
        return x


class UNet3D(Module):
    """Encoder/decoder with skip concatenation; only H and W are resampled."""

    def __init__(self, config: UNet3DConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        n = config.convs_per_level
        widths = [config.base_width * 2**lvl for lvl in range(config.levels)]
        self.widths = widths
        self.encoders = ModuleList()
        self.downs = ModuleList()
        for lvl, w in enumerate(widths):
            cin = config.in_modalities if lvl == 0 else w
            self.encoders.append(ConvStack(cin, w, n, rng))
            if lvl < config.levels - 1:
                self.downs.append(ConvBN(w, widths[lvl + 1], 3, (1, 2, 2), rng=rng))
        self.ups = ModuleList()
        self.decoders = ModuleList()
        for lvl in reversed(range(config.levels - 1)):
            self.ups.append(ConvBN(widths[lvl + 1], widths[lvl], 1, rng=rng))
            self.decoders.append(ConvStack(2 * widths[lvl], widths[lvl], n, rng))
        self.out = Conv3d(widths[0], 1, 1, bias=True, rng=rng)

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        c = self.config
        if x.ndim != 5 or x.shape[1] != c.in_modalities:
            raise DimensionError(f"expected input (B, {c.in_modalities}, D, H, W), got shape {x.shape}")
        H, W = x.shape[3:]
        if H % c.divisor or W % c.divisor:
            raise DimensionError(f"H and W must be divisible by {c.divisor}, got H={H}, W={W}")
        if not train:
            with no_tape():
                return self._forward(x, False)
        return self._forward(x, True)

    __call__ = forward

    def _forward(self, x, train):
        skips = []
        for lvl, enc in enumerate(self.encoders):
            x = enc(x, train)
            if lvl < len(self.downs):
                skips.append(x)
                x = self.downs[lvl](x, train)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(upsample_trilinear(x, (1, 2, 2)), train)
            x = dec(concat_channels([skip, x]), train)
        return self.out(x)


def build_unet3d(config: UNet3DConfig | None = None) -> UNet3D:
    return UNet3D(config or UNet3DConfig())


def forward_unet(model: UNet3D, x: Tensor, train: bool = True) -> Tensor:
    return model.forward(x, train)
