"""Recycled criss-cross attention.

Each pixel attends to the H+W-1 positions sharing its row or column. One pass
gives every output pixel a cross-shaped receptive field; running the pass
twice through the same projection weights (recycling) lets information hop
row-to-column, so two cycles connect every pixel pair. The module wraps the
attention in a channel bottleneck: reduce to C/4, attend, post-convolve,
concatenate with the untouched input, and fuse back to C channels.
"""

from __future__ import annotations

import numpy as np

from . import nn, ops
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

MAX_CYCLES = 4


class RCCA(nn.Module):
    """Attention enhancement for one pyramid level of ``channels`` width."""

    def __init__(self, channels: int, cycles: int = 2,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if channels % 8 != 0:
            raise ConfigError(f"RCCA needs channels divisible by 8, got {channels}")
        if not 0 <= cycles <= MAX_CYCLES:
            raise ConfigError(f"cycles must be in [0, {MAX_CYCLES}], got {cycles}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cycles = cycles
        work = channels // 4
        self.reduce = nn.Conv2d(channels, work, 3, pad=1, rng=rng)
        self.q_conv = nn.Conv2d(work, channels // 8, 1, bias=False, rng=rng)
        self.k_conv = nn.Conv2d(work, channels // 8, 1, bias=False, rng=rng)
        self.v_conv = nn.Conv2d(work, work, 1, bias=False, rng=rng)
        self.post = nn.Conv2d(work, work, 3, pad=1, rng=rng)
        self.fuse = nn.Conv2d(channels + work, channels, 1, rng=rng)

    def cca_pass(self, x: Tensor) -> Tensor:
        """One attention sweep at working width; output shape = input shape.

        The residual add is part of the pass, so zero V weights make it an
        exact identity.
        """
        q = self.q_conv(x)
        k = self.k_conv(x)
        v = self.v_conv(x)
        scores = ops.cca_affinity(q, k)
        attn = T.softmax_axis(scores, 1)
        return ops.cca_aggregate(attn, v) + x

    def __call__(self, x: Tensor) -> Tensor:
        work = self.reduce(x)
        for _ in range(self.cycles):
            work = self.cca_pass(work)
        work = self.post(work)
        return self.fuse(T.concat_channels([x, work]))
