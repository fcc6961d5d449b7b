"""Pyramid fusion with redundant-feature subtraction.

The fusion stage is a standard top-down pyramid: lateral 1x1 convs bring all
levels to 64 channels, coarser levels are upsampled and added into finer
ones, and the four maps are upsampled to stride 4, concatenated and fused by
a 3x3 conv. One designated level can first be cleaned by the reduction
module, which estimates background noise through two residual dense blocks
and subtracts it from the feature map: D' = D - crc(O + O'). The final crc
conv starts at zero so the subtraction is an exact no-op at initialization.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .backbone import WIDTHS
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class RdbBlock(nn.Module):
    """Residual dense block: 4 densely connected 3x3 convs, 1x1 fusion, add.

    Layer j sees the input plus every earlier layer's output, so its input
    width is C + j*growth; each layer emits ``growth`` channels through ReLU.
    """

    def __init__(self, channels: int, growth: int = 16,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.layers = [nn.Conv2d(channels + j * growth, growth, 3, pad=1, rng=rng)
                       for j in range(4)]
        self.fusion = nn.Conv2d(channels + 4 * growth, channels, 1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.channels:
            raise ConfigError(f"RdbBlock built for {self.channels} channels, got {x.data.shape[1]}")
        feats = [x]
        for layer in self.layers:
            feats.append(T.relu(layer(T.concat_channels(feats))))
        return x + self.fusion(T.concat_channels(feats))


class RFRM(nn.Module):
    """Noise-subtraction branch: D' = D - crc(O + O').

    A 3x3 stem maps the level to the working width, two dense blocks estimate
    noise (the second fed by the residual sum of the stem and first block),
    and a Conv-ReLU-Conv projects the summed estimates back to the level
    width for subtraction.
    """

    def __init__(self, channels: int, work: int = 64,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = nn.Conv2d(channels, work, 3, pad=1, rng=rng)
        self.rdb1 = RdbBlock(work, rng=rng)
        self.rdb2 = RdbBlock(work, rng=rng)
        self.crc1 = nn.Conv2d(work, work, 3, pad=1, rng=rng)
        self.crc2 = nn.Conv2d(work, channels, 1, rng=rng)
        self.crc2.weight.zero_()  # exact no-op until training moves it

    def noise(self, d: Tensor) -> Tensor:
        x0 = self.stem(d)
        o = T.relu(self.rdb1(x0))
        mid = x0 + o
        o_prime = mid + T.relu(self.rdb2(mid))
        return self.crc2(T.relu(self.crc1(o + o_prime)))

    def __call__(self, d: Tensor) -> Tensor:
        return d - self.noise(d)


class RFPN(nn.Module):
    """Pyramid levels -> one stride-4, 64-channel fused map."""

    def __init__(self, widths=WIDTHS, out_ch: int = 64, use_rfrm: bool = True,
                 rfrm_level: int = 2, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0 <= rfrm_level < len(widths):
            raise ConfigError(f"rfrm_level must be in [0, {len(widths)}), got {rfrm_level}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.use_rfrm = use_rfrm
        self.rfrm_level = rfrm_level
        # the reduction branch is always built so checkpoints keep the same
        # parameter names whether or not the ablation flag evaluates it
        self.rfrm = RFRM(widths[rfrm_level], rng=rng)
        self.laterals = [nn.Conv2d(w, out_ch, 1, rng=rng) for w in widths]
        self.fuse = nn.Conv2d(out_ch * len(widths), out_ch, 3, pad=1, rng=rng)

    def __call__(self, levels: list[Tensor]) -> Tensor:
        if len(levels) != len(self.laterals):
            raise ShapeError(f"expected {len(self.laterals)} pyramid levels, got {len(levels)}")
        levels = list(levels)
        if self.use_rfrm:
            levels[self.rfrm_level] = self.rfrm(levels[self.rfrm_level])
        lat = [conv(lv) for conv, lv in zip(self.laterals, levels)]
        # top-down: coarsest stays, each finer level adds the upsampled sum
        tops = [None] * len(lat)
        tops[-1] = lat[-1]
        for i in range(len(lat) - 2, -1, -1):
            tops[i] = lat[i] + T.upsample(tops[i + 1], 2, "bilinear")
        full = [tops[0]]
        for i in range(1, len(tops)):
            full.append(T.upsample(tops[i], 2 ** i, "bilinear"))
        return self.fuse(T.concat_channels(full))
