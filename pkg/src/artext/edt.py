"""Exact Euclidean distance transform with nearest-site lookup.

Two-pass squared-distance algorithm: a column sweep finds, for every pixel,
the nearest site row within its own column; a row sweep then minimizes
(x - i)^2 + column_distance(y, i)^2 over source columns i. All arithmetic is
in integers, so results are exact, and ties resolve to the smallest source
column (then the nearest row from the column sweep), which keeps the feature
transform deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyMaskError

_INF = np.int64(1 << 40)  # larger than any squared distance on a real grid


def edt_squared(sites: np.ndarray, return_features: bool = False):
    """Exact squared distance from every pixel to the nearest True site.

    Returns int64 distances, or (distances, site_y, site_x) when
    ``return_features``; site arrays give the coordinates of a nearest site
    per pixel.
    """
    m = np.asarray(sites, dtype=bool)
    if m.ndim != 2:
        raise ValueError("edt_squared expects a 2-D mask")
    if not m.any():
        raise EmptyMaskError("distance transform of an all-zero mask")
    h, w = m.shape

    # column pass: g[y, x] = |y - r| for the nearest site row r in column x
    rows = np.arange(h, dtype=np.int64)[:, None]
    g = np.full((h, w), _INF, dtype=np.int64)
    src_row = np.zeros((h, w), dtype=np.int64)
    # downward sweep
    run = np.full(w, -_INF, dtype=np.int64)  # row of last site seen above
    for y in range(h):
        run[m[y]] = y
        g[y] = rows[y] - run
        src_row[y] = run
    # upward sweep
    run = np.full(w, _INF, dtype=np.int64)
    for y in range(h - 1, -1, -1):
        run[m[y]] = y
        up = run - rows[y]
        better = up < g[y]
        g[y][better] = up[better]
        src_row[y][better] = run[better]
    # columns without any site keep a sentinel; h + w squared still exceeds
    # every true distance, so such columns can never win the row-pass min
    np.minimum(g, h + w, out=g)

    # row pass: d2[y, x] = min_i (x - i)^2 + g[y, i]^2, vectorized per row
    cols = np.arange(w, dtype=np.int64)
    dx2 = (cols[:, None] - cols[None, :]) ** 2          # (x, i)
    g2 = g * g
    d2 = np.empty((h, w), dtype=np.int64)
    if not return_features:
        for y in range(h):
            d2[y] = (dx2 + g2[y][None, :]).min(axis=1)
        return d2
    site_y = np.empty((h, w), dtype=np.int64)
    site_x = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        total = dx2 + g2[y][None, :]                    # (x, i)
        best = total.argmin(axis=1)                     # smallest i wins ties
        d2[y] = total[cols, best]
        site_x[y] = best
        site_y[y] = src_row[y][best]
    return d2, site_y, site_x


def edt(sites: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances (float64) to the nearest True site."""
    return np.sqrt(edt_squared(sites).astype(np.float64))
