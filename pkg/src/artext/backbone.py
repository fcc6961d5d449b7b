"""Four-level convolutional feature pyramid.

A compact residual network: a two-conv stem takes the image to stride 4, then
four stages of two residual blocks each emit features at strides 4, 8, 16 and
32 with 64, 128, 256 and 512 channels. The topology mirrors the usual
detection backbones at a parameter budget a single CPU core can train.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

STRIDES = (4, 8, 16, 32)
WIDTHS = (64, 128, 256, 512)


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a shortcut; 1x1 projection when shape changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, pad=1, rng=rng)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, pad=1, rng=rng)
        if stride != 1 or in_ch != out_ch:
            self.proj = nn.Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(T.relu(self.conv1(x)))
        sc = x if self.proj is None else self.proj(x)
        return T.relu(y + sc)


class Backbone(nn.Module):
    """Image (N, 3, H, W) to pyramid [(N, 64, H/4, W/4), ..., (N, 512, H/32, W/32)].

    H and W must be divisible by 32 so every level divides evenly; callers
    pad the image first.
    """

    def __init__(self, rng: np.random.Generator | None = None, in_ch: int = 3):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem1 = nn.Conv2d(in_ch, WIDTHS[0], 7, stride=2, pad=3, rng=rng)
        self.stem2 = nn.Conv2d(WIDTHS[0], WIDTHS[0], 3, stride=2, pad=1, rng=rng)
        stages = []
        prev = WIDTHS[0]
        for si, width in enumerate(WIDTHS):
            stride = 1 if si == 0 else 2
            stages.append(ResidualBlock(prev, width, stride, rng))
            stages.append(ResidualBlock(width, width, 1, rng))
            prev = width
        self.stages = stages

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.data.ndim != 4:
            raise ShapeError("backbone expects an NCHW image tensor")
        h, w = image.data.shape[2], image.data.shape[3]
        if h % 32 or w % 32:
            raise ShapeError(f"image size {h}x{w} not divisible by 32")
        x = T.relu(self.stem2(T.relu(self.stem1(image))))
        levels = []
        for i in range(0, len(self.stages), 2):
            x = self.stages[i + 1](self.stages[i](x))
            levels.append(x)
        return levels
