"""Field prediction head, supervision targets, and the training loss.

The head reads the stride-4 fused map and emits five channels: two text/
non-text logits, a normalized distance-to-boundary field, and a 2-channel
unit direction field pointing at the nearest boundary pixel. Ground truth
uses the same conventions, built from annotation polygons with an exact
distance transform. The loss combines hard-negative-mined cross-entropy,
smooth-L1 on the distance field, cosine alignment on directions, and a
point loss on every boundary-refinement iterate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, nn, ops
from . import tensor as T
from .edt import edt_squared
from .tensor import Tensor

GT_STRIDE = 4
OHEM_NEG_RATIO = 3


@dataclass
class FieldMaps:
    """Head outputs at stride 4. ``dir_unit`` is for consumers that need the
    hard zero-or-unit convention; the raw tensor is what the loss trains."""

    cls: Tensor        # (N, 2, h, w) logits: channel 0 background, 1 text
    dist: Tensor       # (N, 1, h, w) in [0, 1] after sigmoid
    dir_raw: Tensor    # (N, 2, h, w) unnormalized direction prediction

    def text_prob(self) -> np.ndarray:
        z = self.cls.data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e[:, 1] / e.sum(axis=1)

    def dir_unit(self) -> np.ndarray:
        d = self.dir_raw.data
        norm = np.sqrt((d * d).sum(axis=1, keepdims=True))
        unit = np.where(norm > 1e-6, d / np.maximum(norm, 1e-30), 0.0)
        return unit.astype(d.dtype)


@dataclass
class GroundTruthMaps:
    """Supervision targets at stride 4 plus instance bookkeeping."""

    cls: np.ndarray        # (N, h, w) int8: 0 background, 1 text
    dist: np.ndarray       # (N, h, w) float32 in [0, 1]
    direction: np.ndarray  # (N, 2, h, w) float32 unit vectors, 0 off-text
    instance: np.ndarray   # (N, h, w) int32: 0 background, else instance id
    ignore: np.ndarray     # (N, h, w) bool: excluded from every loss


class SegHead(nn.Module):
    """Two dilated 3x3 convs then a 1x1 projection to the five field channels."""

    def __init__(self, in_ch: int = 64, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = nn.Conv2d(in_ch, in_ch, 3, pad=2, dilation=2, rng=rng)
        self.conv2 = nn.Conv2d(in_ch, in_ch, 3, pad=4, dilation=4, rng=rng)
        self.proj = nn.Conv2d(in_ch, 5, 1, rng=rng)

    def __call__(self, fused: Tensor) -> FieldMaps:
        x = T.relu(self.conv1(fused))
        x = T.relu(self.conv2(x))
        out = self.proj(x)
        return FieldMaps(
            cls=T.narrow(out, 1, 0, 2),
            dist=T.sigmoid(T.narrow(out, 1, 2, 1)),
            dir_raw=T.narrow(out, 1, 3, 2),
        )


def _instance_fields(inst_mask: np.ndarray):
    """Distance and direction targets for one instance mask (h, w)."""
    h, w = inst_mask.shape
    inside = inst_mask
    # boundary = instance pixels 4-adjacent to background or the image edge
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = inside
    nb = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
          padded[1:-1, :-2] & padded[1:-1, 2:])
    boundary = inside & ~nb
    dist = np.zeros((h, w), dtype=np.float32)
    direction = np.zeros((2, h, w), dtype=np.float32)
    if not boundary.any():
        return dist, direction
    d2, sy, sx = edt_squared(boundary, return_features=True)
    d = np.sqrt(d2.astype(np.float64))
    dmax = d[inside].max()
    if dmax > 0:
        dist[inside] = (d[inside] / dmax).astype(np.float32)
    ys, xs = np.nonzero(inside & ~boundary)
    if len(ys):
        vx = (sx[ys, xs] - xs).astype(np.float64)
        vy = (sy[ys, xs] - ys).astype(np.float64)
        norm = np.sqrt(vx * vx + vy * vy)
        norm[norm == 0] = 1.0
        direction[0, ys, xs] = (vx / norm).astype(np.float32)
        direction[1, ys, xs] = (vy / norm).astype(np.float32)
    return dist, direction


def make_gt_maps(polygons_per_image, ignore_flags_per_image, image_size) -> GroundTruthMaps:
    """Build stride-4 supervision maps from per-image polygon lists.

    ``polygons_per_image``: list (batch) of lists of (k, 2) arrays in image
    coordinates. Instances that rasterize to nothing (area below one grid
    pixel) are marked ignore instead of supervised.
    """
    ih, iw = image_size
    h, w = ih // GT_STRIDE, iw // GT_STRIDE
    n = len(polygons_per_image)
    gt = GroundTruthMaps(
        cls=np.zeros((n, h, w), dtype=np.int8),
        dist=np.zeros((n, h, w), dtype=np.float32),
        direction=np.zeros((n, 2, h, w), dtype=np.float32),
        instance=np.zeros((n, h, w), dtype=np.int32),
        ignore=np.zeros((n, h, w), dtype=bool),
    )
    for bi, (polys, flags) in enumerate(zip(polygons_per_image, ignore_flags_per_image)):
        for ii, poly in enumerate(polys):
            poly = np.asarray(poly, dtype=np.float64)
            mask = geometry.scanline_fill(poly, h, w, step=float(GT_STRIDE))
            ignored = bool(flags[ii]) if ii < len(flags) else False
            if not mask.any() or abs(geometry.polygon_area(poly)) < GT_STRIDE ** 2:
                gt.ignore[bi][mask] = True
                continue
            if ignored:
                gt.ignore[bi][mask] = True
                gt.instance[bi][mask] = ii + 1
                continue
            gt.cls[bi][mask] = 1
            gt.instance[bi][mask] = ii + 1
            dist, direction = _instance_fields(mask)
            gt.dist[bi][mask] = dist[mask]
            gt.direction[bi][:, mask] = direction[:, mask]
    return gt


def _ohem_mask(ce: np.ndarray, pos: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Select all positives plus the hardest negatives at 3:1, per batch.

    ``ce`` holds per-pixel loss values (detached); returns a float mask.
    When there are no positives the caller falls back to plain CE.
    """
    mask = np.zeros(ce.shape, dtype=ce.dtype)
    for bi in range(ce.shape[0]):
        p = pos[bi] & valid[bi]
        ng = (~pos[bi]) & valid[bi]
        mask[bi][p] = 1.0
        n_keep = min(int(p.sum()) * OHEM_NEG_RATIO, int(ng.sum()))
        if n_keep > 0:
            neg_vals = ce[bi][ng]
            thresh = np.partition(neg_vals, -n_keep)[-n_keep]
            chosen = ng & (ce[bi] >= thresh)
            # ties at the threshold may overshoot; trim deterministically
            if chosen.sum() > n_keep:
                ys, xs = np.nonzero(chosen & (ce[bi] == thresh))
                extra = int(chosen.sum()) - n_keep
                chosen[ys[:extra], xs[:extra]] = False
            mask[bi][chosen] = 1.0
    return mask


def detection_loss(pred: FieldMaps, gt: GroundTruthMaps,
                   refined: list[Tensor] | None = None,
                   gt_points: np.ndarray | None = None,
                   w_cls: float = 1.0, w_dist: float = 1.0,
                   w_dir: float = 1.0, w_bp: float = 1.0):
    """Total training loss and its components.

    ``refined`` is the list of boundary iterates, each (P, 2, 1, K) in image
    coordinates; ``gt_points`` is (P, K, 2) matched targets. Either may be
    None/empty when no proposals exist. Returns (loss Tensor, dict of floats);
    the reported components are unweighted, the total applies the weights.
    """
    valid = ~gt.ignore
    pos = (gt.cls == 1) & valid
    logp = T.log_softmax_axis(pred.cls, 1)
    target = gt.cls.astype(np.int64)
    onehot = np.zeros(pred.cls.data.shape, dtype=pred.cls.dtype)
    bidx = np.arange(target.shape[0])[:, None, None]
    yidx = np.arange(target.shape[1])[None, :, None]
    xidx = np.arange(target.shape[2])[None, None, :]
    onehot[bidx, target, yidx, xidx] = 1.0
    ce_map = -(logp.data * onehot).sum(axis=1)

    if pos.any():
        sel = _ohem_mask(ce_map, pos, valid)
    else:
        sel = valid.astype(pred.cls.dtype)
    denom = max(float(sel.sum()), 1.0)
    l_cls = T.mul_scalar(T.sum_all(T.mul_const(logp, -onehot * sel[:, None])), 1.0 / denom)

    dist_mask = pos.astype(pred.dist.dtype)[:, None]
    l_dist = ops.smooth_l1_loss(pred.dist, gt.dist[:, None], dist_mask)

    dir_norm = np.sqrt((gt.direction ** 2).sum(axis=1))
    dir_mask = (pos & (dir_norm > 0.5)).astype(pred.dir_raw.dtype)
    n_dir = float(dir_mask.sum())
    if n_dir > 0:
        unit = ops.l2_normalize_pixels(pred.dir_raw)
        cos_sum = T.sum_all(T.mul_const(unit, gt.direction * dir_mask[:, None]))
        l_dir = T.add_scalar(T.mul_scalar(cos_sum, -1.0 / n_dir), 1.0)
    else:
        l_dir = T.mul_scalar(T.sum_all(pred.dir_raw), 0.0)

    if refined and gt_points is not None and len(gt_points):
        per_iter = []
        for it in refined:
            pts = it.data[:, :, 0, :].transpose(0, 2, 1)  # (P, K, 2)
            targets = np.empty_like(gt_points, dtype=np.float64)
            for pi in range(len(gt_points)):
                aligned, _, _ = geometry.best_cyclic_alignment(pts[pi], gt_points[pi])
                targets[pi] = aligned
            tgt = targets.transpose(0, 2, 1)[:, :, None, :]  # (P, 2, 1, K)
            per_iter.append(ops.smooth_l1_loss(it, tgt.astype(it.dtype)))
        l_bp = per_iter[0]
        for extra in per_iter[1:]:
            l_bp = l_bp + extra
        l_bp = T.mul_scalar(l_bp, 1.0 / len(per_iter))
    else:
        l_bp = T.mul_scalar(T.sum_all(pred.cls), 0.0)

    total = (T.mul_scalar(l_cls, w_cls) + T.mul_scalar(l_dist, w_dist)
             + T.mul_scalar(l_dir, w_dir) + T.mul_scalar(l_bp, w_bp))
    parts = {
        "cls": float(l_cls.data), "dist": float(l_dist.data),
        "dir": float(l_dir.data), "bp": float(l_bp.data),
        "total": float(total.data),
    }
    return total, parts
