"""3D high-resolution multi-branch generator.

Layout (defaults shown for ``num_stages=4``)::

    stage 1   one stem per modality -> channel concatenation
    stage 2   branch 0 module; stride-(1,2,2) conv spawns branch 1
    stage 3   branch 0/1 modules, cross-branch fusion; spawns branch 2
    stage 4   branch 0/1/2 modules, cross-branch fusion
    head      upsample + concatenate all branches -> ResBlock -> 1 channel

Only H and W are downsampled; slabs are three slices deep.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..volgrid import DimensionError, Tensor, concat_channels, no_tape, relu, slice_channels, upsample_trilinear
from .layers import ConvBN, FCNModule, Module, ModuleList, ResBlock

REFERENCE_WIDTHS = (64, 128, 256)
# Shrinks the He-initialized head output convs so early predictions start near zero.
HEAD_INIT_SCALE = 0.1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    num_stages: int = 4
    resblocks_per_module: int = 4
    stem_depth: int = 2
    in_modalities: int = 3
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.num_stages < 2:
            raise ConfigError("num_stages must be >= 2 (stem plus at least one branch stage)")
        if len(self.widths) < self.num_branches:
            raise ConfigError(f"{self.num_branches} branches need {self.num_branches} widths, got {self.widths}")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must be strictly increasing, got {self.widths}")
        if self.in_modalities not in (1, 2, 3):
            raise ConfigError(f"in_modalities must be 1, 2 or 3, got {self.in_modalities}")
        if self.resblocks_per_module < 1 or self.stem_depth < 1:
            raise ConfigError("resblocks_per_module and stem_depth must be >= 1")

    @property
    def num_branches(self) -> int:
        return self.num_stages - 1

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_branches - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class Stem(Module):
    def __init__(self, width: int, depth: int, rng):
        super().__init__()
        self.layers = ModuleList(ConvBN(1 if i == 0 else width, width, rng=rng) for i in range(depth))

    def __call__(self, x, train):
        for layer in self.layers:
            x = layer(x, train)
        return x


class Downsample(Module):
    """Chain of stride-(1,2,2) 3x3x3 Conv-BN; ReLU between links, none after the last."""

    def __init__(self, cin: int, cout: int, steps: int, rng, final_act: bool = False):
        super().__init__()
        links = []
        for s in range(steps):
            last = s == steps - 1
            links.append(ConvBN(cin, cout if last else cin, 3, (1, 2, 2), act=final_act if last else True, rng=rng))
        self.links = ModuleList(links)

    def __call__(self, x, train):
        for link in self.links:
            x = link(x, train)
        return x


class Upsample(Module):
    """Trilinear upsampling in H, W followed by a 1x1x1 Conv-BN channel match."""

    def __init__(self, cin: int, cout: int, factor: int, rng):
        super().__init__()
        self.proj = ConvBN(cin, cout, 1, act=False, rng=rng)
        self.factor = (1, factor, factor)

    def __call__(self, x, train):
        return self.proj(upsample_trilinear(x, self.factor), train)


class Fusion(Module):
    """Every branch receives the sum of all branches resampled to its scale."""

    def __init__(self, widths, rng):
        super().__init__()
        n = len(widths)
        self.n = n
        self.paths = ModuleList()
        for i in range(n):
            row = ModuleList()
            for j in range(n):
                if j > i:
                    row.append(Upsample(widths[j], widths[i], 2 ** (j - i), rng))
                elif j < i:
                    row.append(Downsample(widths[j], widths[i], i - j, rng))
                else:
                    row.append(Module())
            self.paths.append(row)

    def __call__(self, xs, train):
        out = []
        for i in range(self.n):
            acc = xs[i]
            for j in range(self.n):
                if j != i:
                    acc = acc + self.paths[i][j](xs[j], train)
            out.append(relu(acc))
        return out


class HRNet3D(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.widths[: config.num_branches]
        nb = config.num_branches
        blocks = config.resblocks_per_module

        self.stems = ModuleList(Stem(w[0], config.stem_depth, rng) for _ in range(config.in_modalities))
        self.stages = ModuleList()
        self.fusions = ModuleList()
        self.transitions = ModuleList()
        for s in range(nb):
            active = s + 1
            modules = ModuleList()
            for b in range(active):
                cin = config.in_modalities * w[0] if (s == 0 and b == 0) else w[b]
                modules.append(FCNModule(cin, w[b], blocks, rng))
            self.stages.append(modules)
            self.fusions.append(Fusion(w[:active], rng) if active > 1 else Module())
            if active < nb:
                self.transitions.append(Downsample(w[active - 1], w[active], 1, rng, final_act=True))
        self.head = ResBlock(sum(w), 1, rng=rng, linear_output=True, hidden=w[0],
                             output_scale=HEAD_INIT_SCALE)

    def _check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 5:
            raise DimensionError(f"expected input (B, modalities, D, H, W), got shape {x.shape}")
        if x.shape[1] != c.in_modalities:
            raise DimensionError(f"model built for {c.in_modalities} modalities, input has {x.shape[1]}")
        H, W = x.shape[3:]
        if H % c.divisor or W % c.divisor:
            raise DimensionError(f"H and W must be divisible by {c.divisor}, got H={H}, W={W}")

    def forward(self, x: Tensor, train: bool = True, return_branches: bool = False):
        """Map ``x[B, M, D, H, W]`` to ``[B, 1, D, H, W]``.

        Eval mode uses running BN statistics and records nothing on the tape.
        """
        self._check_input(x)
        if not train:
            with no_tape():
                return self._forward(x, False, return_branches)
        return self._forward(x, True, return_branches)

    __call__ = forward

    def _forward(self, x, train, return_branches):
        M = self.config.in_modalities
        feats = [stem(slice_channels(x, m, m + 1), train) for m, stem in enumerate(self.stems)]
        branches = [concat_channels(feats) if M > 1 else feats[0]]
        nb = self.config.num_branches
        for s in range(nb):
            branches = [mod(b, train) for mod, b in zip(self.stages[s], branches)]
            if len(branches) > 1:
                branches = self.fusions[s](branches, train)
            if s < nb - 1:
                branches.append(self.transitions[s](branches[-1], train))
        up = [b if i == 0 else upsample_trilinear(b, (1, 2**i, 2**i)) for i, b in enumerate(branches)]
        out = self.head(concat_channels(up) if len(up) > 1 else up[0], train)
        return (out, branches) if return_branches else out


def build_hrnet(config: ModelConfig | None = None) -> HRNet3D:
    return HRNet3D(config or ModelConfig())
