"""Structured differentiable operations: convolution, cross-shaped attention
primitives, bilinear map sampling, and the loss kernels built on them.

The convolution lowers to an im2col matrix product so the single BLAS thread
does the heavy lifting; backward recomputes the patch matrix instead of
keeping it alive, trading FLOPs for a flat memory profile.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _result

__all__ = [
    "conv2d",
    "conv1d_circular",
    "cca_affinity",
    "cca_aggregate",
    "bilinear_sample",
    "smooth_l1_loss",
    "l2_normalize_pixels",
]


def conv_out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, dilation: int):
    """Return (patches, oh, ow) with patches shaped (N, C*kh*kw, oh*ow)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = conv_out_size(h, kh, stride, pad, dilation)
    ow = conv_out_size(w, kw, stride, pad, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} (pad={pad}, dilation={dilation})")
    # windows: (N, C, oh_full, ow_full, kh, kw) view; stride/dilation select
    if dilation > 1:
        # dilated kernel = plain kernel over a larger window, sampled sparsely
        span_h = dilation * (kh - 1) + 1
        span_w = dilation * (kw - 1) + 1
        win = np.lib.stride_tricks.sliding_window_view(x, (span_h, span_w), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    else:
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow]
    patches = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(patches), oh, ow


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, pad, dilation, oh, ow) -> np.ndarray:
    """Scatter-add column gradients back to input layout (inverse of _im2col)."""
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    dx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        iy = i * dilation
        for j in range(kw):
            jx = j * dilation
            dx[:, :, iy:iy + stride * oh:stride, jx:jx + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:hp - pad, pad:wp - pad]
    return np.ascontiguousarray(dx)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    n, c, h, w = x.data.shape
    oc, ic, kh, kw = weight.data.shape
    if ic != c:
        raise ShapeError(f"conv2d: weight expects {ic} input channels, got {c}")
    patches, oh, ow = _im2col(x.data, kh, kw, stride, pad, dilation)
    wmat = weight.data.reshape(oc, ic * kh * kw)
    out = np.matmul(wmat, patches).reshape(n, oc, oh, ow)
    if bias is not None:
        if bias.data.shape != (oc,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({oc},)")
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gmat = g.reshape(n, oc, oh * ow)
        if weight.requires_grad:
            # recompute patches: cheaper than pinning them for the whole graph
            p, _, _ = _im2col(x.data, kh, kw, stride, pad, dilation)
            gw = np.einsum("nop,nkp->ok", gmat, p, optimize=True)
            weight.accumulate_grad(gw.reshape(oc, ic, kh, kw))
        if x.requires_grad:
            cols = np.matmul(wmat.T, gmat)
            x.accumulate_grad(_col2im(cols, x.data.shape, kh, kw, stride, pad, dilation, oh, ow))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _result(out, parents, bwd, "conv2d")


def conv1d_circular(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1-D convolution with circular padding along the last axis.

    ``x`` is (N, C, 1, L) and the weight (O, C, 1, k) with odd k; the wrap
    keeps closed-contour node features rotation-consistent.
    """
    if x.data.ndim != 4 or x.data.shape[2] != 1:
        raise ShapeError("conv1d_circular expects (N, C, 1, L) input")
    k = weight.data.shape[3]
    if k % 2 != 1 or weight.data.shape[2] != 1:
        raise ShapeError("conv1d_circular expects (O, C, 1, k) weight with odd k")
    r = k // 2
    if r == 0:
        return conv2d(x, weight, bias)
    xp = _pad_circular(x, r)
    return conv2d(xp, weight, bias)


def _pad_circular(x: Tensor, r: int) -> Tensor:
    ln = x.data.shape[3]
    if ln < r:
        raise ShapeError(f"circular pad {r} exceeds length {ln}")
    out = np.concatenate([x.data[..., ln - r:], x.data, x.data[..., :r]], axis=3)

    def bwd(g):
        if x.requires_grad:
            core = g[..., r:r + ln].copy()
            core[..., :r] += g[..., r + ln:]
            core[..., ln - r:] += g[..., :r]
            x.accumulate_grad(core)

    return _result(out, (x,), bwd, "pad_circular")


# ---------------------------------------------------------------------------
# criss-cross attention primitives
#
# For a pixel (y, x) the attention set is its full column plus its full row,
# H + W - 1 positions. Position index i enumerates the column first
# (i in [0, H) is pixel (i, x), including the pixel itself at i = y), then the
# row with the own column skipped (i in [H, H+W-1) is pixel (y, j) where
# j = (i - H) + (1 if i - H >= x else 0)).


def _row_index(H: int, W: int) -> np.ndarray:
    """(W-1, W) gather map: entry [s, x] = source column j for row slot s."""
    s = np.arange(W - 1)[:, None]
    x = np.arange(W)[None, :]
    return (s + (s >= x)).astype(np.int64)


def cca_affinity(q: Tensor, k: Tensor) -> Tensor:
    """Energy of every pixel against its criss-cross set.

    ``q`` and ``k`` are (N, C, H, W); the result is (N, H+W-1, H, W) with the
    position layout documented above.
    """
    if q.data.shape != k.data.shape:
        raise ShapeError(f"cca_affinity: q {q.data.shape} vs k {k.data.shape}")
    n, c, h, w = q.data.shape
    col = np.einsum("ncyx,ncix->niyx", q.data, k.data, optimize=True)
    rowfull = np.einsum("ncyx,ncyj->njyx", q.data, k.data, optimize=True)
    idx = _row_index(h, w)  # (W-1, W)
    # gather: row[s, y, x] = rowfull[idx[s, x], y, x]
    gi = np.broadcast_to(idx[None, :, None, :], (n, w - 1, h, w))
    row = np.take_along_axis(rowfull, gi, axis=1)
    out = np.concatenate([col, row], axis=1)

    def bwd(g):
        gcol = np.ascontiguousarray(g[:, :h])
        grow = np.ascontiguousarray(g[:, h:])
        if q.requires_grad:
            dq = np.einsum("niyx,ncix->ncyx", gcol, k.data, optimize=True)
            # row part: dq[.,.,y,x] += sum_s grow[s,y,x] * k[.,.,y,idx[s,x]]
            kgath = k.data[:, :, :, idx]          # (n, c, h, W-1, w)
            dq += np.einsum("nsyx,ncysx->ncyx", grow, kgath, optimize=True)
            q.accumulate_grad(dq)
        if k.requires_grad:
            dk = np.einsum("niyx,ncyx->ncix", gcol, q.data, optimize=True)
            # dk[., ., y, j] += sum over (s, x) with idx[s, x] == j of grow[s, y, x] * q[., ., y, x]
            contrib = np.einsum("nsyx,ncyx->ncysx", grow, q.data, optimize=True)  # (n, c, h, W-1, w)
            dkrow = np.zeros((n, c, h, w), dtype=g.dtype)
            flat = contrib.reshape(n, c, h, (w - 1) * w)
            np.add.at(dkrow.transpose(3, 0, 1, 2), idx.reshape(-1), flat.transpose(3, 0, 1, 2))
            dk += dkrow
            k.accumulate_grad(dk)

    return _result(out, (q, k), bwd, "cca_affinity")


def cca_aggregate(attn: Tensor, v: Tensor) -> Tensor:
    """Blend values along each pixel's criss-cross set with given weights.

    ``attn`` is (N, H+W-1, H, W) (normally softmax output) and ``v`` is
    (N, C, H, W); result is (N, C, H, W).
    """
    n, l, h, w = attn.data.shape
    if v.data.shape[0] != n or v.data.shape[2] != h or v.data.shape[3] != w:
        raise ShapeError(f"cca_aggregate: attn {attn.data.shape} vs v {v.data.shape}")
    if l != h + w - 1:
        raise ShapeError(f"cca_aggregate: position axis {l} != H+W-1 = {h + w - 1}")
    c = v.data.shape[1]
    idx = _row_index(h, w)
    acol = attn.data[:, :h]
    arow = attn.data[:, h:]
    out = np.einsum("niyx,ncix->ncyx", acol, v.data, optimize=True)
    vgath = v.data[:, :, :, idx]                  # (n, c, h, W-1, w)
    out += np.einsum("nsyx,ncysx->ncyx", arow, vgath, optimize=True)

    def bwd(g):
        if attn.requires_grad:
            gcol = np.einsum("ncyx,ncix->niyx", g, v.data, optimize=True)
            grow = np.einsum("ncyx,ncysx->nsyx", g, v.data[:, :, :, idx], optimize=True)
            attn.accumulate_grad(np.concatenate([gcol, grow], axis=1))
        if v.requires_grad:
            dv = np.einsum("niyx,ncyx->ncix", attn.data[:, :h], g, optimize=True)
            contrib = np.einsum("nsyx,ncyx->ncysx", attn.data[:, h:], g, optimize=True)
            dvrow = np.zeros((n, c, h, w), dtype=g.dtype)
            np.add.at(dvrow.transpose(3, 0, 1, 2), idx.reshape(-1),
                      contrib.reshape(n, c, h, (w - 1) * w).transpose(3, 0, 1, 2))
            v.accumulate_grad(dv + dvrow)

    return _result(out, (attn, v), bwd, "cca_aggregate")


# ---------------------------------------------------------------------------
# map sampling

def bilinear_sample(feat: Tensor, coords: Tensor) -> Tensor:
    """Sample (N, C, H, W) maps at fractional pixel coordinates.

    ``coords`` is (N, 2, 1, P) holding (x, y) in pixel units of the feature
    grid. Samples are bilinear with clamping at the border; the result is
    (N, C, 1, P). Gradients flow to both the maps and the coordinates, so a
    head that shifts the coordinates can learn from sampled values.
    """
    if feat.data.ndim != 4 or coords.data.ndim != 4 or coords.data.shape[1] != 2 or coords.data.shape[2] != 1:
        raise ShapeError(f"bilinear_sample: feat {feat.data.shape}, coords {coords.data.shape}")
    n, c, h, w = feat.data.shape
    p = coords.data.shape[3]
    xs = np.clip(coords.data[:, 0, 0], 0.0, w - 1.0)   # (n, p)
    ys = np.clip(coords.data[:, 1, 0], 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    fx = xs - x0
    fy = ys - y0
    ni = np.arange(n)[:, None]
    f00 = feat.data[ni, :, y0, x0].transpose(0, 2, 1)   # (n, c, p)
    f01 = feat.data[ni, :, y0, np.minimum(x0 + 1, w - 1)].transpose(0, 2, 1)
    f10 = feat.data[ni, :, np.minimum(y0 + 1, h - 1), x0].transpose(0, 2, 1)
    f11 = feat.data[ni, :, np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)].transpose(0, 2, 1)
    wx = fx[:, None, :]
    wy = fy[:, None, :]
    out = ((1 - wy) * ((1 - wx) * f00 + wx * f01) + wy * ((1 - wx) * f10 + wx * f11))
    out = out[:, :, None, :]

    # clamped samples have zero coordinate gradient on the clamped axis
    live_x = ((coords.data[:, 0, 0] > 0.0) & (coords.data[:, 0, 0] < w - 1.0)).astype(feat.dtype)
    live_y = ((coords.data[:, 1, 0] > 0.0) & (coords.data[:, 1, 0] < h - 1.0)).astype(feat.dtype)

    def bwd(g):
        gs = g[:, :, 0, :]                                # (n, c, p)
        if feat.requires_grad:
            df = np.zeros_like(feat.data)
            w00 = ((1 - wy) * (1 - wx) * gs).transpose(0, 2, 1)  # (n, p, c)
            w01 = ((1 - wy) * wx * gs).transpose(0, 2, 1)
            w10 = (wy * (1 - wx) * gs).transpose(0, 2, 1)
            w11 = (wy * wx * gs).transpose(0, 2, 1)
            x1 = np.minimum(x0 + 1, w - 1)
            y1 = np.minimum(y0 + 1, h - 1)
            np.add.at(df.transpose(0, 2, 3, 1), (ni, y0, x0), w00)
            np.add.at(df.transpose(0, 2, 3, 1), (ni, y0, x1), w01)
            np.add.at(df.transpose(0, 2, 3, 1), (ni, y1, x0), w10)
            np.add.at(df.transpose(0, 2, 3, 1), (ni, y1, x1), w11)
            feat.accumulate_grad(df)
        if coords.requires_grad:
            dvx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10))  # d out / d fx, (n, c, p)
            dvy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01))
            gx = (gs * dvx).sum(axis=1) * live_x               # (n, p)
            gy = (gs * dvy).sum(axis=1) * live_y
            dc = np.zeros_like(coords.data)
            dc[:, 0, 0] = gx
            dc[:, 1, 0] = gy
            coords.accumulate_grad(dc)

    return _result(out, (feat, coords), bwd, "bilinear_sample")


# ---------------------------------------------------------------------------
# loss kernels

def smooth_l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None,
                   beta: float = 1.0) -> Tensor:
    """Huber-style loss averaged over unmasked entries.

    Quadratic inside |d| < beta, linear outside. ``target`` and ``mask`` are
    plain arrays (no gradient); an all-zero mask yields an exact zero loss.
    """
    if pred.data.shape != np.shape(target):
        raise ShapeError(f"smooth_l1_loss: pred {pred.data.shape} vs target {np.shape(target)}")
    t = np.asarray(target, dtype=pred.dtype)
    if mask is None:
        m = np.ones_like(pred.data)
    else:
        m = np.asarray(mask, dtype=pred.dtype)
        m = np.broadcast_to(m, pred.data.shape).astype(pred.dtype)
    denom = float(m.sum())
    if denom == 0.0:
        return _zero_like_loss(pred)
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    val = float((per * m).sum() / denom)

    def bwd(g):
        if pred.requires_grad:
            dd = np.where(quad, d / beta, np.sign(d))
            pred.accumulate_grad((g * dd * m / denom).astype(pred.dtype))

    return _result(np.asarray(val, dtype=pred.dtype).reshape(()), (pred,), bwd, "smooth_l1_loss")


def _zero_like_loss(pred: Tensor) -> Tensor:
    def bwd(g):
        if pred.requires_grad:
            pred.accumulate_grad(np.zeros_like(pred.data))

    return _result(np.zeros((), dtype=pred.dtype), (pred,), bwd, "zero_loss")


def l2_normalize_pixels(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize every pixel's channel vector to unit length (eps-guarded)."""
    if x.data.ndim != 4:
        raise ShapeError("l2_normalize_pixels expects NCHW")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    out = x.data / norm

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            x.accumulate_grad((g - out * dot) / norm)

    return _result(out, (x,), bwd, "l2_normalize_pixels")
