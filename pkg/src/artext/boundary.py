"""Coarse boundary proposals, the discrimination fallback, and iterative
contour refinement.

Extraction is seed-then-claim. The score map (text probability times
distance field) is sharp near word centers and fades toward the rim, so
thresholding it yields one seed per word even when neighbors nearly touch,
but each seed underestimates its word's extent. The probability map is
bilinearly upsampled to pixel resolution, every pixel above the mask
threshold is claimed by its nearest seed, and the claimed region's outline
is traced and resampled to a fixed point budget. During training each
ground-truth instance is assigned the proposal overlapping it most; if that
proposal's area is badly off (outside [0.25, 1.75] of the instance area) or
missing entirely, a replacement is generated from the instance's own mask
through the same extraction pipeline. The refiner then slides all control
points with a weight-shared offset head, re-sampling features at each
iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import geometry, nn, ops
from . import tensor as T
from .edt import edt_squared
from .errors import ConfigError
from .seghead import GT_STRIDE, FieldMaps, GroundTruthMaps
from .tensor import Tensor

NUM_POINTS = 20
SEED_THRESHOLD = 0.25
MASK_THRESHOLD = 0.4
# grid cells, not pixels: a word spanning 3 stride-4 cells is already a
# legitimate instance at small image sizes, so the floor only rejects specks
MIN_SEED_CELLS = 3
RATIO_LOW = 0.25
RATIO_HIGH = 1.75


@dataclass
class MaskMap:
    """Binary grid with provenance; nonzero count computed once."""

    mask: np.ndarray
    source: str  # "predicted" | "ground_truth"
    count: int = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.count = int(self.mask.sum())


@dataclass
class BoundaryProposal:
    """Closed contour of NUM_POINTS (x, y) image coordinates, normalized
    orientation."""

    points: np.ndarray
    image_index: int
    instance_id: int
    source: str  # "predicted" | "gt_fallback"
    score: float

    def grid_mask(self, h: int, w: int) -> np.ndarray:
        """Rasterization of the contour on the stride-4 grid."""
        return geometry.scanline_fill(self.points, h, w, step=float(GT_STRIDE))


def _upsample_to_pixels(cell_map: np.ndarray) -> np.ndarray:
    """Bilinear stride-4 map to a per-pixel map; cell centers keep their
    value and the border rows replicate outward."""
    return ndimage.zoom(cell_map, GT_STRIDE, order=1, grid_mode=True,
                        mode="nearest")


def _trace_pixel_mask(pix_mask: np.ndarray, n_points: int) -> np.ndarray:
    """Closed CCW outline of a pixel mask, resampled to ``n_points`` image
    coordinates."""
    contour = geometry.trace_boundary(pix_mask)
    pts = geometry.normalize_ccw(geometry.resample_closed(contour, n_points))
    return pts + 0.5


def _proposals_from_maps(score: np.ndarray, prob: np.ndarray,
                         image_index: int, source: str,
                         seed_threshold: float = SEED_THRESHOLD,
                         mask_threshold: float = MASK_THRESHOLD,
                         min_cells: int = MIN_SEED_CELLS,
                         n_points: int = NUM_POINTS) -> list[BoundaryProposal]:
    """Shared pipeline f: seed, claim, trace, resample, normalize.

    The confidence is read off the seed cells, which are the sharpest
    evidence; every proposal's pixel region always contains its own seed
    even where the probability mask disagrees.
    """
    seeds, count = geometry.label_components(score > seed_threshold, 8)
    if not count:
        return []
    region = _upsample_to_pixels(prob) > mask_threshold
    _, sy, sx = edt_squared(seeds > 0, return_features=True)
    owner = seeds[sy, sx]
    block = np.ones((GT_STRIDE, GT_STRIDE), dtype=seeds.dtype)
    owner_px = np.kron(owner, block)
    seeds_px = np.kron(seeds, block)
    out = []
    for comp in range(1, count + 1):
        cells = seeds == comp
        if int(cells.sum()) < min_cells:
            continue
        mask = (region & (owner_px == comp)) | (seeds_px == comp)
        out.append(BoundaryProposal(
            points=_trace_pixel_mask(mask, n_points),
            image_index=image_index,
            instance_id=comp,
            source=source,
            score=float(prob[cells].mean()),
        ))
    return out


def extract_proposals(pred: FieldMaps,
                      seed_threshold: float = SEED_THRESHOLD,
                      mask_threshold: float = MASK_THRESHOLD) -> list[BoundaryProposal]:
    """Coarse proposals from predicted maps, flat across the batch."""
    prob = pred.text_prob()
    dist = pred.dist.data[:, 0]
    out = []
    for bi in range(prob.shape[0]):
        out.extend(_proposals_from_maps(
            prob[bi] * dist[bi], prob[bi], bi, "predicted",
            seed_threshold=seed_threshold, mask_threshold=mask_threshold))
    return out


def _instance_fallback(inst_mask: np.ndarray, image_index: int,
                       instance_id: int) -> BoundaryProposal | None:
    """Regenerate a proposal from a GT instance mask via EDT + pipeline f."""
    boundary_sites = _boundary_pixels(inst_mask)
    score = np.zeros(inst_mask.shape, dtype=np.float64)
    if boundary_sites.any():
        d = np.sqrt(edt_squared(boundary_sites).astype(np.float64))
        dmax = d[inst_mask].max()
        if dmax > 0:
            score[inst_mask] = d[inst_mask] / dmax
    prob = inst_mask.astype(np.float64)
    got = _proposals_from_maps(score, prob, image_index, "gt_fallback")
    if not got:
        # thin instance: the interior distance never clears the seed
        # threshold, so seed directly from the mask instead
        got = _proposals_from_maps(prob, prob, image_index, "gt_fallback",
                                   seed_threshold=0.5, min_cells=1)
    if not got:
        return None
    best = max(got, key=lambda p: abs(geometry.polygon_area(p.points)))
    best.instance_id = instance_id
    return best


def _boundary_pixels(inside: np.ndarray) -> np.ndarray:
    h, w = inside.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = inside
    nb = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
          padded[1:-1, :-2] & padded[1:-1, 2:])
    return inside & ~nb


def bdm_keep(ratio: float) -> bool:
    """Eq-style keep window, boundaries inclusive."""
    return RATIO_LOW <= ratio <= RATIO_HIGH


def bdm_select(proposals: list[BoundaryProposal], gt: GroundTruthMaps,
               image_index: int) -> list[BoundaryProposal]:
    """Per-instance training proposals for one image.

    Every non-ignored GT instance yields exactly one proposal: the
    best-overlapping extracted one when its area ratio sits inside the keep
    window, otherwise a fallback regenerated from the instance mask (an
    undetected instance counts as ratio 0). Proposals overlapping no
    instance are dropped here; dense classification supervision is unchanged
    by that.
    """
    inst_map = gt.instance[image_index]
    h, w = inst_map.shape
    ids = [i for i in np.unique(inst_map) if i > 0
           and not gt.ignore[image_index][inst_map == i].all()]
    mine = [p for p in proposals if p.image_index == image_index]
    masks = [MaskMap(p.grid_mask(h, w), "predicted") for p in mine]

    selected = []
    for inst_id in ids:
        inst_mask = inst_map == inst_id
        n_m = int(inst_mask.sum())
        best_i, best_overlap = -1, 0
        for i, mm in enumerate(masks):
            overlap = int((mm.mask & inst_mask).sum())
            if overlap > best_overlap:
                best_i, best_overlap = i, overlap
        ratio = (masks[best_i].count / n_m) if best_i >= 0 and n_m > 0 else 0.0
        if best_i >= 0 and bdm_keep(ratio):
            # copy: one proposal can win several instances and each selected
            # entry must carry its own instance id
            selected.append(replace(mine[best_i], instance_id=int(inst_id)))
        else:
            fb = _instance_fallback(inst_mask, image_index, int(inst_id))
            if fb is not None:
                selected.append(fb)
    return selected


def matched_gt_points(selected: list[BoundaryProposal], gt: GroundTruthMaps,
                      image_index: int) -> np.ndarray:
    """Resampled GT outlines aligned 1:1 with ``selected`` (P, NUM_POINTS, 2).

    Targets go through the same pixel-resolution trace as extraction, so a
    ground-truth fallback proposal and its own target coincide.
    """
    inst_map = gt.instance[image_index]
    pts = np.zeros((len(selected), NUM_POINTS, 2), dtype=np.float64)
    for i, p in enumerate(selected):
        inst_mask = inst_map == p.instance_id
        dense = _upsample_to_pixels(inst_mask.astype(np.float64)) > MASK_THRESHOLD
        if not dense.any():
            dense = np.kron(inst_mask, np.ones((GT_STRIDE, GT_STRIDE), dtype=bool))
        pts[i] = _trace_pixel_mask(dense, NUM_POINTS)
    return pts


class BoundaryRefiner(nn.Module):
    """Weight-shared iterative contour refinement.

    Node features per control point: 64 fused channels, normalized (x, y),
    the distance sample, and the (soft-normalized) direction sample, all
    bilinearly interpolated; 69 channels total. A three-layer circular conv
    encoder plus a per-point residual perceptron feeds a zero-initialized
    offset head, so refinement starts as the identity.
    """

    def __init__(self, feat_ch: int = 64, width: int = 64, iterations: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if iterations < 1:
            raise ConfigError(f"refiner needs iterations >= 1, got {iterations}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.iterations = iterations
        in_ch = feat_ch + 5
        self.enc1 = nn.Conv1dCircular(in_ch, width, 3, rng=rng)
        self.enc2 = nn.Conv1dCircular(width, width, 3, rng=rng)
        self.enc3 = nn.Conv1dCircular(width, width, 3, rng=rng)
        self.mlp1 = nn.Conv2d(width, width, 1, rng=rng)
        self.mlp2 = nn.Conv2d(width, width, 1, rng=rng)
        self.head = nn.Conv2d(width, 2, 1, rng=rng)
        self.head.weight.zero_()

    def node_features(self, fused: Tensor, pred: FieldMaps, coords: Tensor,
                      normalize_coords: bool = True) -> Tensor:
        """Sample per-point features for one image's proposals.

        ``fused`` (1, C, h, w), ``coords`` (P, 2, 1, K) in image pixels.
        """
        p = coords.data.shape[0]
        grid = T.mul_scalar(T.add_scalar(coords, -GT_STRIDE / 2.0), 1.0 / GT_STRIDE)
        featb = T.repeat_batch(fused, p)
        distb = T.repeat_batch(pred.dist, p)
        dirb = T.repeat_batch(ops.l2_normalize_pixels(pred.dir_raw), p)
        fsamp = ops.bilinear_sample(featb, grid)
        dsamp = ops.bilinear_sample(distb, grid)
        dirsamp = ops.bilinear_sample(dirb, grid)
        if normalize_coords:
            h, w = fused.data.shape[2], fused.data.shape[3]
            scale = np.array([w * GT_STRIDE, h * GT_STRIDE],
                             dtype=coords.dtype).reshape(1, 2, 1, 1)
            nxy = T.mul_const(coords, 1.0 / scale)
        else:
            nxy = T.mul_scalar(coords, 0.0)
        return T.concat_channels([fsamp, nxy, dsamp, dirsamp])

    def step(self, fused: Tensor, pred: FieldMaps, coords: Tensor,
             normalize_coords: bool = True) -> Tensor:
        nodes = self.node_features(fused, pred, coords, normalize_coords)
        x = T.relu(self.enc1(nodes))
        x = T.relu(self.enc2(x))
        x = T.relu(self.enc3(x))
        x = x + self.mlp2(T.relu(self.mlp1(x)))
        return coords + self.head(x)

    def __call__(self, fused: Tensor, pred: FieldMaps, init_coords: Tensor,
                 iterations: int | None = None,
                 normalize_coords: bool = True) -> list[Tensor]:
        """All refinement iterates P1..Pn for deep supervision."""
        n = self.iterations if iterations is None else iterations
        if n < 1:
            raise ConfigError("refine needs at least one iteration")
        iterates = []
        coords = init_coords
        for _ in range(n):
            coords = self.step(fused, pred, coords, normalize_coords)
            iterates.append(coords)
        return iterates


def proposals_to_coords(proposals: list[BoundaryProposal], dtype=np.float32) -> Tensor:
    """Stack proposal points into a (P, 2, 1, K) coordinate tensor."""
    if not proposals:
        return Tensor(np.zeros((0, 2, 1, NUM_POINTS), dtype=dtype))
    arr = np.stack([p.points.T[:, None, :] for p in proposals]).astype(dtype)
    return Tensor(arr)


def coords_to_polygons(coords: Tensor) -> list[np.ndarray]:
    """(P, 2, 1, K) tensor back to a list of (K, 2) point arrays."""
    return [coords.data[i, :, 0, :].T.astype(np.float64) for i in range(coords.data.shape[0])]


def rescore(detections: list[BoundaryProposal], prob: np.ndarray
            ) -> list[BoundaryProposal]:
    """Replace each proposal's score with the mean text probability inside
    its (refined) polygon, sampled on the prediction grid.

    Components that survive extraction but refine into a low-confidence
    region get a score near zero, so a single floor separates real words
    from speckle without a size cutoff.
    """
    h, w = prob.shape
    out = []
    for d in detections:
        mask = geometry.scanline_fill(d.points, h, w, step=float(GT_STRIDE))
        score = float(prob[mask].mean()) if mask.any() else 0.0
        out.append(replace(d, score=score))
    return out


def suppress_overlaps(detections: list[BoundaryProposal], image_size,
                      iou_threshold: float = 0.5) -> list[BoundaryProposal]:
    """Greedy dedup: keep the best-scoring polygon of any overlapping pair.

    Fragmented extraction can hand the refiner two shards of one word that
    both converge onto the same boundary; only one should be reported.
    """
    from .geomeval import polygon_iou
    order = sorted(detections, key=lambda d: d.score, reverse=True)
    kept: list[BoundaryProposal] = []
    for d in order:
        if all(polygon_iou(d.points, k.points, image_size) <= iou_threshold
               for k in kept):
            kept.append(d)
    return kept


def artistic_filter(detections: list[BoundaryProposal], image_size,
                    mode: str = "off") -> list[BoundaryProposal]:
    """Post-filter for detections; ``heuristic`` drops tiny or low-confidence
    regions, ``off`` is the identity."""
    if mode == "off":
        return list(detections)
    if mode != "heuristic":
        raise ConfigError(f"artistic_filter mode must be off or heuristic, got {mode!r}")
    h, w = image_size
    min_area = 0.002 * h * w
    return [d for d in detections
            if abs(geometry.polygon_area(d.points)) >= min_area and d.score >= 0.5]
