import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histoseg import imaging
from histoseg.errors import AnnotationError, GeometryError, InputError


def point_in_polygon(px, py, verts):
    """Independent even-odd crossing test for a single point."""
    inside = False
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > py) != (y2 > py):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < x_cross:
                inside = not inside
    return inside


def brute_force_raster(polys, width, height):
    mask = np.zeros((height, width), dtype=np.uint8)
    for poly in polys:
        for y in range(height):
            for x in range(width):
                if point_in_polygon(x + 0.5, y + 0.5, poly.vertices):
                    mask[y, x] = poly.class_index
    return mask


class TestRasterize:
    def test_empty_list_all_background(self):
        mask = imaging.rasterize_polygons([], 5, 7)
        assert mask.shape == (7, 5)
        assert not mask.any()

    def test_square_pixel_count(self):
        square = imaging.PolygonAnnotation(1, [(0, 0), (4, 0), (4, 4), (0, 4)])
        mask = imaging.rasterize_polygons([square], 8, 8)
        assert int((mask == 1).sum()) == 16
        np.testing.assert_array_equal(mask, brute_force_raster([square], 8, 8))

    def test_overlap_later_wins(self):
        a = imaging.PolygonAnnotation(1, [(0, 0), (6, 0), (6, 6), (0, 6)])
        b = imaging.PolygonAnnotation(2, [(3, 3), (8, 3), (8, 8), (3, 8)])
        mask = imaging.rasterize_polygons([a, b], 10, 10)
        assert mask[4, 4] == 2  # center (4.5, 4.5) inside both
        assert mask[1, 1] == 1

    def test_degenerate_polygon_rejected(self):
        with pytest.raises(AnnotationError):
            imaging.PolygonAnnotation(1, [(0, 0), (1, 1)])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_matches_brute_force_on_random_triangles(self, seed):
        rng = np.random.default_rng(seed)
        verts = [(float(x), float(y)) for x, y in rng.uniform(0, 16, size=(3, 2))]
        poly = imaging.PolygonAnnotation(1, verts)
        got = imaging.rasterize_polygons([poly], 16, 16)
        np.testing.assert_array_equal(got, brute_force_raster([poly], 16, 16))

    def test_convex_polygon_bbox_matches_center_scan(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            cx, cy = rng.uniform(8, 40, size=2)
            r = rng.uniform(3, 12)
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=6))
            verts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]
            poly = imaging.PolygonAnnotation(1, verts)
            mask = imaging.rasterize_polygons([poly], 48, 48)
            box = imaging.tight_bbox(mask, 1)
            inside = [(x, y) for y in range(48) for x in range(48)
                      if point_in_polygon(x + 0.5, y + 0.5, verts)]
            if not inside:
                assert box is None
                continue
            xs = [p[0] for p in inside]
            ys = [p[1] for p in inside]
            assert (box.x_min, box.y_min, box.x_max, box.y_max) == (
                min(xs), min(ys), max(xs), max(ys))


class TestTightBbox:
    def test_single_pixel(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[5, 3] = 4
        assert imaging.tight_bbox(mask, 4) == imaging.BBox(3, 5, 3, 5)

    def test_two_pixels_scan_oracle(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[1, 1] = 2
        mask[2, 6] = 2
        assert imaging.tight_bbox(mask, 2) == imaging.BBox(1, 1, 6, 2)

    def test_absent_class(self):
        assert imaging.tight_bbox(np.zeros((4, 4), dtype=np.uint8), 3) is None

    def test_normalized_full_image_box(self):
        box = imaging.BBox(0, 0, 7, 7)
        assert box.normalized(8, 8) == (0.0, 0.0, 1.0, 1.0)


class TestTile:
    def _pair(self, w, h, seed=0):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)
        mask = rng.integers(0, 4, size=(h, w)).astype(np.uint8)
        return img, mask

    def test_exact_division(self):
        img, mask = self._pair(2048, 1024)
        assert len(imaging.tile(img, mask, 1024)) == 2

    def test_remainder_padding(self):
        img, mask = self._pair(1500, 1000)
        tiles = imaging.tile(img, mask, 1024)
        assert len(tiles) == 2  # ceil(1500/1024) * ceil(1000/1024)
        assert all(t.image.shape[:2] == (1024, 1024) for t in tiles)
        assert tiles[1].pad_right == 1024 - (1500 - 1024)
        assert tiles[0].pad_bottom == 24

    def test_tile_contents_copy_semantics(self):
        img, mask = self._pair(300, 200, seed=1)
        t = imaging.tile(img, mask, 100)[3]
        np.testing.assert_array_equal(t.image, img[t.y:t.y + 100, t.x:t.x + 100])

    def test_reassembly_roundtrip(self):
        img, mask = self._pair(250, 130, seed=2)
        tiles = imaging.tile(img, mask, 64)
        rebuilt = np.zeros_like(img)
        for t in tiles:
            h = 64 - t.pad_bottom
            w = 64 - t.pad_right
            rebuilt[t.y:t.y + h, t.x:t.x + w] = t.image[:h, :w]
        np.testing.assert_array_equal(rebuilt, img)

    def test_empty_image_rejected(self):
        with pytest.raises(InputError):
            imaging.tile(np.zeros((0, 0, 3), dtype=np.uint8), np.zeros((0, 0)), 64)


class TestSampleAndResize:
    def test_constant_mask_stays_constant(self):
        img = np.full((600, 600, 3), 128, dtype=np.uint8)
        mask = np.full((600, 600), 3, dtype=np.uint8)
        _, out_mask = imaging.sample_and_resize(img, mask, np.random.default_rng(0))
        assert (out_mask == 3).all()
        assert out_mask.shape == (224, 224)

    def test_seed_determinism(self):
        rng = np.random.default_rng(7)
        img = rng.integers(0, 255, size=(700, 640, 3), dtype=np.uint8)
        mask = rng.integers(0, 5, size=(700, 640)).astype(np.uint8)
        a = imaging.sample_and_resize(img, mask, np.random.default_rng(11))
        b = imaging.sample_and_resize(img, mask, np.random.default_rng(11))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_checkerboard_nearest_neighbor_oracle(self):
        yy, xx = np.mgrid[0:512, 0:512]
        mask = ((yy // 32 + xx // 32) % 2 + 1).astype(np.uint8)
        out = imaging.resize_nearest(mask, 224, 224)
        oracle = np.empty((224, 224), dtype=np.uint8)
        for i in range(224):
            for j in range(224):
                sy = min(int(np.floor((i + 0.5) * 512 / 224)), 511)
                sx = min(int(np.floor((j + 0.5) * 512 / 224)), 511)
                oracle[i, j] = mask[sy, sx]
        np.testing.assert_array_equal(out, oracle)
        for cls in (1, 2):
            assert int((out == cls).sum()) == int((oracle == cls).sum())

    def test_too_small_tile_rejected(self):
        img = np.zeros((100, 100, 3), dtype=np.uint8)
        with pytest.raises(GeometryError):
            imaging.sample_and_resize(img, np.zeros((100, 100)), np.random.default_rng(0))


class TestBinaryView:
    def test_all_class(self):
        assert imaging.binary_view(np.full((3, 3), 2, dtype=np.uint8), 2).all()

    def test_absent_class(self):
        assert not imaging.binary_view(np.zeros((3, 3), dtype=np.uint8), 2).any()

    def test_popcount(self):
        mask = np.array([[1, 2, 1], [0, 1, 1], [2, 0, 0]], dtype=np.uint8)
        assert int(imaging.binary_view(mask, 1).sum()) == 4

    def test_views_partition_pixels(self):
        rng = np.random.default_rng(3)
        mask = rng.integers(0, 5, size=(20, 20)).astype(np.uint8)
        total = sum(imaging.binary_view(mask, c).astype(int) for c in range(5))
        np.testing.assert_array_equal(total, np.ones((20, 20), dtype=int))
