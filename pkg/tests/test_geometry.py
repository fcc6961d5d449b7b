import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artext import geometry as G
from artext.errors import DataError


UNIT_SQUARE = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])


class TestArea:
    def test_square(self):
        assert G.polygon_area(UNIT_SQUARE) == pytest.approx(16.0)

    def test_orientation_flips_sign(self):
        assert G.polygon_area(UNIT_SQUARE[::-1]) == pytest.approx(-16.0)

    def test_triangle(self):
        tri = np.array([[0, 0], [2, 0], [0, 3]], dtype=float)
        assert abs(G.polygon_area(tri)) == pytest.approx(3.0)

    def test_too_few_points(self):
        with pytest.raises(DataError):
            G.polygon_area(np.zeros((2, 2)))


class TestNormalize:
    def test_idempotent(self):
        p = G.normalize_ccw(UNIT_SQUARE)
        assert np.array_equal(G.normalize_ccw(p), p)

    def test_reversed_input_restored(self):
        a = G.normalize_ccw(UNIT_SQUARE)
        b = G.normalize_ccw(UNIT_SQUARE[::-1])
        assert G.polygon_area(a) > 0 and G.polygon_area(b) > 0
        assert set(map(tuple, a)) == set(map(tuple, b))


class TestResample:
    def test_count_and_start(self):
        out = G.resample_closed(UNIT_SQUARE, 8)
        assert out.shape == (8, 2)
        assert np.allclose(out[0], UNIT_SQUARE[0])

    def test_square_midpoints(self):
        # perimeter 16, 8 points -> every 2 units: corners and edge midpoints
        out = G.resample_closed(UNIT_SQUARE, 8)
        want = np.array([[0, 0], [2, 0], [4, 0], [4, 2], [4, 4], [2, 4], [0, 4], [0, 2]],
                        dtype=float)
        assert np.allclose(out, want)

    def test_uniform_spacing(self):
        rng = np.random.default_rng(0)
        pts = rng.random((7, 2)) * 10
        out = G.resample_closed(pts, 50)
        closed = np.vstack([out, out[:1]])
        seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        # arc-length parametrization: consecutive gaps agree to ~the local
        # curvature error
        assert seg.std() / seg.mean() < 0.35

    def test_degenerate_polygon(self):
        out = G.resample_closed(np.array([[1.0, 2.0]]), 5)
        assert out.shape == (5, 2)
        assert np.allclose(out, [1.0, 2.0])


class TestScanlineFill:
    def test_square_centered_samples(self):
        # square [0,4)x[0,4) on a unit grid: 16 cells inside
        mask = G.scanline_fill(UNIT_SQUARE, 8, 8)
        assert mask[:4, :4].all()
        assert mask.sum() == 16

    def test_triangle_half_plane(self):
        tri = np.array([[0, 0], [8, 0], [0, 8]], dtype=float)
        mask = G.scanline_fill(tri, 8, 8)
        # sample (c+.5, r+.5) is inside iff x + y <= 8; points exactly on the
        # hypotenuse count as inside under the strict-left crossing rule
        want = (np.arange(8)[:, None] + np.arange(8)[None, :] + 1.0) <= 8
        assert np.array_equal(mask, want)

    def test_origin_and_step(self):
        mask = G.scanline_fill(UNIT_SQUARE, 1, 1, origin=(1.5, 1.5), step=1.0)
        assert mask[0, 0]  # sample (2.0, 2.0) inside
        mask = G.scanline_fill(UNIT_SQUARE, 1, 1, origin=(10, 10), step=1.0)
        assert not mask[0, 0]

    def test_even_odd_self_overlap(self):
        # bowtie: crossing edges -> the overlap region has crossing count 2
        bow = np.array([[0, 0], [6, 6], [6, 0], [0, 6]], dtype=float)
        mask = G.scanline_fill(bow, 6, 6)
        assert not mask[3, 3] or not mask[2, 2]  # middle not double-filled

    def test_stride4_sampling_matches_centers(self):
        # cell (r, c) at step 4 samples image point (4c+2, 4r+2)
        poly = np.array([[1.9, 1.9], [2.1, 1.9], [2.1, 2.1], [1.9, 2.1]])
        mask = G.scanline_fill(poly, 2, 2, step=4.0)
        assert mask[0, 0] and mask.sum() == 1


class TestComponents:
    def test_two_blobs(self):
        m = np.zeros((6, 6), dtype=bool)
        m[0:2, 0:2] = True
        m[4:6, 4:6] = True
        labels, n = G.label_components(m)
        assert n == 2
        assert labels[0, 0] == 1 and labels[5, 5] == 2

    def test_diagonal_connectivity(self):
        m = np.eye(4, dtype=bool)
        _, n8 = G.label_components(m, 8)
        _, n4 = G.label_components(m, 4)
        assert n8 == 1 and n4 == 4

    def test_empty(self):
        labels, n = G.label_components(np.zeros((3, 3), dtype=bool))
        assert n == 0 and labels.sum() == 0

    def test_labels_deterministic_scan_order(self):
        m = np.zeros((4, 8), dtype=bool)
        m[2, 6] = True   # later in scan order
        m[1, 1] = True
        labels, n = G.label_components(m)
        assert n == 2
        assert labels[1, 1] == 1 and labels[2, 6] == 2


class TestTraceBoundary:
    def test_filled_square(self):
        m = np.zeros((5, 5), dtype=bool)
        m[1:4, 1:4] = True
        c = G.trace_boundary(m)
        assert len(c) == 8
        assert G.polygon_area(c) > 0  # normalized orientation directly
        got = set(map(tuple, c.astype(int)))
        want = {(x, y) for x in range(1, 4) for y in range(1, 4) if x in (1, 3) or y in (1, 3)}
        assert got == want

    def test_single_pixel(self):
        m = np.zeros((3, 3), dtype=bool)
        m[1, 2] = True
        c = G.trace_boundary(m)
        assert np.array_equal(c, [[2, 1]])

    def test_horizontal_strip_out_and_back(self):
        m = np.zeros((1, 4), dtype=bool)
        m[0, :] = True
        c = G.trace_boundary(m)
        assert tuple(c[0]) == (0.0, 0.0)
        xs = c[:, 0]
        assert xs.max() == 3.0  # reaches the far end

    def test_region_touching_border(self):
        m = np.ones((3, 3), dtype=bool)
        c = G.trace_boundary(m)
        got = set(map(tuple, c.astype(int)))
        assert (1, 1) not in got  # interior pixel excluded
        assert len(got) == 8

    def test_empty_raises(self):
        with pytest.raises(DataError):
            G.trace_boundary(np.zeros((2, 2), dtype=bool))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 10), st.integers(2, 10), st.integers(0, 2 ** 31 - 1))
    def test_random_blob_contour_is_subset_of_region(self, h, w, seed):
        rng = np.random.default_rng(seed)
        m = rng.random((h, w)) < 0.6
        labels, n = G.label_components(m)
        if n == 0:
            return
        comp = labels == 1
        c = G.trace_boundary(comp)
        for x, y in c.astype(int):
            assert comp[y, x]


class TestCyclicAlignment:
    def test_identity_when_equal(self):
        pts = np.random.default_rng(1).random((10, 2)) * 5
        aligned, shift, flipped = G.best_cyclic_alignment(pts, pts)
        assert shift == 0 and not flipped
        assert np.allclose(aligned, pts)

    def test_recovers_known_shift(self):
        pts = G.resample_closed(UNIT_SQUARE, 12)
        rolled = np.roll(pts, 5, axis=0)
        aligned, shift, flipped = G.best_cyclic_alignment(pts, rolled)
        assert np.allclose(aligned, pts)
        assert not flipped

    def test_recovers_reversal(self):
        pts = G.resample_closed(UNIT_SQUARE, 12) + np.random.default_rng(2).random((12, 2)) * 0.01
        rev = pts[::-1].copy()
        aligned, shift, flipped = G.best_cyclic_alignment(pts, rev)
        assert flipped
        assert np.allclose(aligned, pts)

    def test_never_worse_than_unaligned(self):
        rng = np.random.default_rng(3)
        a = rng.random((8, 2))
        b = rng.random((8, 2))
        aligned, _, _ = G.best_cyclic_alignment(a, b)

        def sl1(u, v):
            d = np.abs(u - v)
            return float(np.where(d < 1, 0.5 * d * d, d - 0.5).mean())

        assert sl1(a, aligned) <= sl1(a, b) + 1e-12
