"""Polygon and binary-mask geometry shared by ground-truth generation,
proposal extraction and evaluation.

Conventions: points are (x, y) float pairs in row-major arrays of shape
(n, 2); the image y axis points down. "Counter-clockwise" here means a
positive shoelace sum, i.e. visually clockwise on screen; what matters is
that every producer normalizes the same way.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

EIGHT_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, 1),
                   (1, 1), (1, 0), (1, -1), (0, -1))  # clockwise from NW


def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area; positive for the normalized orientation."""
    p = np.asarray(pts, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 3:
        raise DataError(f"polygon needs shape (n>=3, 2), got {p.shape}")
    x, y = p[:, 0], p[:, 1]
    return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def normalize_ccw(pts: np.ndarray) -> np.ndarray:
    """Reverse the vertex order if the shoelace sum is negative."""
    p = np.asarray(pts, dtype=np.float64)
    return p[::-1].copy() if polygon_area(p) < 0 else p.copy()


def resample_closed(pts: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed polyline to n points, uniform in arc length.

    The first output point is the first input vertex; zero-length edges are
    tolerated. A degenerate (zero-perimeter) polygon repeats its vertex.
    """
    p = np.asarray(pts, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 1:
        raise DataError(f"resample_closed: bad points shape {p.shape}")
    closed = np.vstack([p, p[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        return np.repeat(p[:1], n, axis=0)
    want = np.arange(n) * (total / n)
    idx = np.searchsorted(cum, want, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    denom = np.where(seg[idx] > 0, seg[idx], 1.0)
    frac = (want - cum[idx]) / denom
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def scanline_fill(pts: np.ndarray, h: int, w: int,
                  origin=(0.0, 0.0), step: float = 1.0) -> np.ndarray:
    """Even-odd rasterization of a polygon onto an h x w grid of samples.

    Cell (r, c) samples the point (origin_x + (c + 0.5) * step,
    origin_y + (r + 0.5) * step) and is filled when a ray to the left
    crosses the boundary an odd number of times. Half-open edge intervals
    make shared vertices count once.
    """
    p = np.asarray(pts, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise DataError(f"scanline_fill: bad points shape {p.shape}")
    ox, oy = float(origin[0]), float(origin[1])
    x1 = p[:, 0]
    y1 = p[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    mask = np.zeros((h, w), dtype=bool)
    xs = ox + (np.arange(w) + 0.5) * step
    for r in range(h):
        sy = oy + (r + 0.5) * step
        crosses = ((y1 <= sy) & (sy < y2)) | ((y2 <= sy) & (sy < y1))
        if not crosses.any():
            continue
        xa, ya, xb, yb = x1[crosses], y1[crosses], x2[crosses], y2[crosses]
        xint = xa + (sy - ya) * (xb - xa) / (yb - ya)
        mask[r] = (xint[None, :] < xs[:, None]).sum(axis=1) % 2 == 1
    return mask


def label_components(mask: np.ndarray, connectivity: int = 8):
    """Label connected True regions; returns (labels int32, count).

    Labels are 1..count in scan order of each component's first pixel, so
    the numbering is deterministic.
    """
    m = np.asarray(mask, dtype=bool)
    if connectivity == 8:
        offs = EIGHT_NEIGHBORS
    elif connectivity == 4:
        offs = ((-1, 0), (0, 1), (1, 0), (0, -1))
    else:
        raise DataError(f"connectivity must be 4 or 8, got {connectivity}")
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for sy, sx in zip(*np.nonzero(m)):
        if labels[sy, sx]:
            continue
        count += 1
        stack = [(sy, sx)]
        labels[sy, sx] = count
        while stack:
            y, x = stack.pop()
            for dy, dx in offs:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not labels[ny, nx]:
                    labels[ny, nx] = count
                    stack.append((ny, nx))
    return labels, count


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Outer boundary of a connected region, Moore-neighbor traced.

    Returns (k, 2) pixel coordinates as (x, y) ordered clockwise on screen
    (positive shoelace), starting at the row-major first pixel. Thin regions
    legitimately revisit pixels (the walk goes out and back). The walk is a
    deterministic function of (pixel, backtrack) state, so it terminates
    exactly when a state repeats.
    """
    m = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(m)
    if len(ys) == 0:
        raise DataError("trace_boundary: empty mask")
    sy, sx = int(ys[0]), int(xs[0])  # nonzero is row-major: topmost, leftmost
    if len(ys) == 1:
        return np.array([[sx, sy]], dtype=np.float64)

    h, w = m.shape
    dir_index = {d: i for i, d in enumerate(EIGHT_NEIGHBORS)}

    def fg(y, x):
        return 0 <= y < h and 0 <= x < w and m[y, x]

    contour = [(sx, sy)]
    cy, cx = sy, sx
    by, bx = sy, sx - 1       # entered from the left (background by scan order)
    seen = {(cy, cx, by, bx)}
    while True:
        bi = dir_index[(by - cy, bx - cx)]
        step = None
        for i in range(1, 9):
            d = (bi + i) % 8
            dy, dx = EIGHT_NEIGHBORS[d]
            ty, tx = cy + dy, cx + dx
            if fg(ty, tx):
                # backtrack becomes the background cell examined just before
                pd = (d - 1) % 8
                step = (ty, tx, cy + EIGHT_NEIGHBORS[pd][0], cx + EIGHT_NEIGHBORS[pd][1])
                break
        if step is None:
            break  # unreachable for multi-pixel components
        if step in seen:
            break
        seen.add(step)
        cy, cx, by, bx = step
        contour.append((cx, cy))
    return np.array(contour, dtype=np.float64)


def best_cyclic_alignment(pred: np.ndarray, target: np.ndarray, beta: float = 1.0):
    """Align a closed target polyline to a prediction before the point loss.

    Tries every cyclic shift in both orientations and returns the variant of
    ``target`` minimizing the mean smooth-L1 distance, with the winning
    (shift, flipped) tag. Selection is discrete; the caller differentiates
    against the returned constant array.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2:
        raise DataError(f"alignment shapes differ: {p.shape} vs {t.shape}")
    n = len(p)
    best = None
    for flipped, cand in ((False, t), (True, t[::-1])):
        for s in range(n):
            rolled = np.roll(cand, s, axis=0)
            d = np.abs(rolled - p)
            loss = float(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean())
            if best is None or loss < best[0]:
                best = (loss, rolled, s, flipped)
    return best[1], best[2], best[3]
