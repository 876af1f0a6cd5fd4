import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuselet.errors import DataError
from fuselet.raster import (
    FLOAT_FILL,
    ChannelSpec,
    GeoGrid,
    LabelPolygonSet,
    Raster,
    collocate_stack,
    intersection_grid,
    load_polygons,
    load_raster,
    rasterize_polygons,
    resample_nearest,
    save_polygons,
    save_raster,
)

from oracles import crossing_inside


def grid(n_rows=4, n_cols=4, px=1.0, lon=0.0, lat=10.0):
    return GeoGrid(lon, lat, px, px, n_rows, n_cols)


def write_envi(path, data, dtype="<f4", code=4, extra=""):
    data = np.asarray(data)
    bands, rows, cols = (1,) + data.shape if data.ndim == 2 else data.shape
    path.with_suffix(".img").write_bytes(data.astype(dtype).tobytes())
    path.with_suffix(".hdr").write_text(
        f"ENVI\nsamples = {cols}\nlines = {rows}\nbands = {bands}\ndata type = {code}\n"
        f"interleave = bsq\nbyte order = 0\nmap info = {{Geographic Lat/Lon, 1, 1, 0.0, 10.0, 1.0, 1.0}}\n{extra}"
    )


class TestGeoGrid:
    def test_pixel_centres(self):
        g = GeoGrid(-120.0, 48.0, 0.5, 0.25, 3, 4)
        assert g.center(0, 0) == (-119.75, 47.875)
        lon, lat = g.center(2, 3)
        assert math.isclose(lon, -120 + 3.5 * 0.5) and math.isclose(lat, 48 - 2.5 * 0.25)

    def test_index_of_inverts_centres(self):
        g = GeoGrid(-120.0, 48.0, 0.001, 0.001, 50, 70)
        lon, lat = g.centers()
        r, c = g.index_of(lon, lat)
        assert np.array_equal(r, np.arange(50)[:, None].repeat(70, 1))
        assert np.array_equal(c, np.arange(70)[None].repeat(50, 0))

    @pytest.mark.parametrize("kw", [dict(n_rows=0), dict(n_cols=0), dict(px=0.0), dict(px=math.inf)])
    def test_invalid_grid(self, kw):
        with pytest.raises(DataError):
            grid(**kw)


class TestRasterIO:
    def test_fill_marks_invalid(self, tmp_path):
        p = tmp_path / "a.img"
        write_envi(p, [[1, 2], [3, -9999]], extra="data ignore value = -9999\n")
        r = load_raster(p)
        assert r.valid.tolist() == [[True, True], [True, False]]

    def test_declared_fill_overrides(self, tmp_path):
        p = tmp_path / "a.img"
        write_envi(p, [[1, 2], [3, 7]])
        r = load_raster(p, ChannelSpec(fill=7))
        assert r.valid.tolist() == [[True, True], [True, False]]

    def test_valid_range_from_header(self, tmp_path):
        p = tmp_path / "a.img"
        write_envi(p, [[1, 250], [3, 4]], extra="valid range = {0, 100}\n")
        assert load_raster(p).valid.tolist() == [[True, False], [True, True]]

    def test_nan_marks_invalid(self, tmp_path):
        p = tmp_path / "a.img"
        write_envi(p, [[1, np.nan], [3, 4]])
        assert load_raster(p).valid.tolist() == [[True, False], [True, True]]

    def test_per_channel_fill_collapses(self, tmp_path):
        p = tmp_path / "a.img"
        data = np.ones((2, 2, 2))
        data[0, 0, 0] = -1
        data[1, 1, 1] = -2
        write_envi(p, data)
        r = load_raster(p, ChannelSpec(fill=[-1, -2]))
        assert r.valid.tolist() == [[False, True], [True, False]]

    def test_channel_selection(self, tmp_path):
        p = tmp_path / "a.img"
        write_envi(p, np.arange(12).reshape(3, 2, 2))
        r = load_raster(p, ChannelSpec(channels=[2, 0]))
        assert r.values[:, 0, 0].tolist() == [8, 0]

    def test_round_trip_float(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(3, 5, 6)).astype(np.float32)
        valid = rng.random((5, 6)) > 0.2
        r = Raster(GeoGrid(-120.0, 48.0, 0.001, 0.002, 5, 6), values, valid, ("a", "b", "c"))
        save_raster(r, tmp_path / "r.img")
        back = load_raster(tmp_path / "r.img")
        assert back.equals(r)
        assert back.grid == r.grid
        assert back.channel_names == ("a", "b", "c")
        raw = np.fromfile(tmp_path / "r.img", dtype="<f4").reshape(3, 5, 6)
        assert (raw[:, ~valid] == FLOAT_FILL).all()

    def test_round_trip_int_labels(self, tmp_path):
        labels = np.arange(-6, 24, dtype=np.int64).reshape(5, 6) * 1000
        r = Raster(grid(5, 6), labels.astype(np.int32), np.ones((5, 6), bool))
        save_raster(r, tmp_path / "l.img")
        back = load_raster(tmp_path / "l.img")
        assert back.values.dtype == np.int32 and back.equals(r)

    def test_round_trip_all_invalid(self, tmp_path):
        r = Raster(grid(3, 3), np.zeros((1, 3, 3)), np.zeros((3, 3), bool))
        save_raster(r, tmp_path / "x.img")
        assert not load_raster(tmp_path / "x.img").valid.any()

    def test_missing_header(self, tmp_path):
        with pytest.raises(DataError):
            load_raster(tmp_path / "nope.img")

    def test_payload_size_mismatch(self, tmp_path):
        p = tmp_path / "a.img"
        write_envi(p, [[1, 2], [3, 4]])
        p.write_bytes(b"\0" * 12)
        with pytest.raises(DataError):
            load_raster(p)

    def test_caller_array_stays_writable(self):
        a = np.zeros((3, 3))
        r = Raster(grid(3, 3), a, np.ones((3, 3), bool))
        a[0, 0] = 1.0
        assert r.values[0, 0, 0] == 0.0


class TestResample:
    def test_identity(self):
        rng = np.random.default_rng(1)
        src = Raster(grid(4, 5), rng.normal(size=(2, 4, 5)), rng.random((4, 5)) > 0.3)
        assert resample_nearest(src, src.grid).equals(src)

    def test_against_exhaustive_search(self):
        rng = np.random.default_rng(2)
        src = Raster(grid(4, 4), rng.normal(size=(1, 4, 4)), np.ones((4, 4), bool))
        target = GeoGrid(0.0, 10.0, 2.0, 2.0, 2, 2)
        out = resample_nearest(src, target)
        slon, slat = src.grid.centers()
        for r in range(2):
            for c in range(2):
                tlon, tlat = target.center(r, c)
                d = (slon - tlon) ** 2 + (slat - tlat) ** 2
                # every 2x2 block has four equidistant centres; the tie rule takes the south-east one
                best = np.flatnonzero(d.ravel() == d.min())
                assert out.values[0, r, c] == src.values[0].ravel()[best.max()]

    def test_unambiguous_nearest(self):
        rng = np.random.default_rng(3)
        src = Raster(GeoGrid(0.0, 10.0, 1.0, 1.0, 7, 9), rng.normal(size=(1, 7, 9)), np.ones((7, 9), bool))
        target = GeoGrid(0.3, 9.6, 1.7, 1.3, 4, 4)
        out = resample_nearest(src, target)
        slon, slat = src.grid.centers()
        for r in range(4):
            for c in range(4):
                tlon, tlat = target.center(r, c)
                # off the tie lines, the nearest centre is the one whose pixel contains the point
                inside = (np.abs(slon - tlon) < 0.5) & (np.abs(slat - tlat) < 0.5)
                assert inside.sum() == 1
                assert out.values[0, r, c] == src.values[0][inside][0]

    def test_outside_extent_is_invalid(self):
        src = Raster(grid(4, 4), np.ones((1, 4, 4)), np.ones((4, 4), bool))
        target = GeoGrid(2.0, 10.0, 1.0, 1.0, 2, 4)
        out = resample_nearest(src, target)
        assert out.valid.tolist() == [[True, True, False, False]] * 2

    def test_disjoint(self):
        src = Raster(grid(4, 4), np.ones((1, 4, 4)), np.ones((4, 4), bool))
        with pytest.raises(DataError):
            resample_nearest(src, GeoGrid(100.0, 10.0, 1.0, 1.0, 2, 2))

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        src = Raster(GeoGrid(0.0, 10.0, 0.7, 0.7, 9, 9), rng.normal(size=(1, 9, 9)), rng.random((9, 9)) > 0.2)
        g = GeoGrid(0.5, 9.5, 1.1, 0.9, 5, 5)
        once = resample_nearest(src, g)
        assert resample_nearest(once, g).equals(once)


class TestCollocate:
    def test_single_unchanged(self):
        r = Raster(grid(3, 4), np.arange(12.0).reshape(3, 4), np.ones((3, 4), bool))
        assert collocate_stack([r]).equals(r)

    def test_identical_grids_stack(self):
        rng = np.random.default_rng(5)
        a = Raster(grid(4, 4), rng.normal(size=(3, 4, 4)), rng.random((4, 4)) > 0.3)
        b = Raster(grid(4, 4), rng.normal(size=(2, 4, 4)), rng.random((4, 4)) > 0.3)
        out = collocate_stack([a, b])
        assert out.n_channels == 5
        assert np.array_equal(out.valid, a.valid & b.valid)
        assert np.array_equal(out.values[:3], a.values) and np.array_equal(out.values[3:], b.values)

    def test_mixed_resolution_grid(self):
        # 10 m cells over 0..200 m, 50 m cells over 30..330 m (in a local metric frame)
        fine = Raster(GeoGrid(0.0, 200.0, 10.0, 10.0, 20, 20), np.zeros((1, 20, 20)), np.ones((20, 20), bool))
        coarse = Raster(GeoGrid(30.0, 230.0, 50.0, 50.0, 6, 6), np.zeros((1, 6, 6)), np.ones((6, 6), bool))
        g = intersection_grid([fine.grid, coarse.grid])
        # intersection lon 30..200, lat 0..200; 170 m / 50 -> 3 cols, 200 m / 50 -> 4 rows
        assert g == GeoGrid(30.0, 200.0, 50.0, 50.0, 4, 3)
        assert collocate_stack([fine, coarse]).grid == g


def random_ring(rng, lon0, lat0, w, h):
    """Star-shaped polygon (often concave) inside the box."""
    n = int(rng.integers(3, 12))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.15, 0.5, n)
    cx, cy = lon0 + w / 2, lat0 - h / 2
    pts = np.column_stack([cx + rad * np.cos(ang) * w, cy + rad * np.sin(ang) * h])
    return np.vstack([pts, pts[:1]])


class TestRasterize:
    def test_empty(self):
        assert not rasterize_polygons(LabelPolygonSet("fire", []), grid(5, 5)).any()

    def test_full_cover(self):
        g = grid(5, 6)
        ring = [[g.west, g.north], [g.east, g.north], [g.east, g.south], [g.west, g.south]]
        assert rasterize_polygons(LabelPolygonSet("fire", [ring]), g).all()

    def test_triangle(self):
        g = GeoGrid(0.0, 8.0, 1.0, 1.0, 8, 8)
        tri = [[0.2, 7.9], [7.7, 4.1], [1.3, 0.4]]
        got = rasterize_polygons(LabelPolygonSet("smoke", [tri]), g)
        lon, lat = g.centers()
        ring = tri + [tri[0]]
        expect = np.array([[crossing_inside(x, y, ring) for x, y in zip(rx, ry)] for rx, ry in zip(lon, lat)])
        assert np.array_equal(got, expect) and got.any()

    @settings(max_examples=120, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_even_odd_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = GeoGrid(-1.0, 1.0, 0.13, 0.11, 17, 15)
        rings = [random_ring(rng, g.west, g.north, g.east - g.west, g.north - g.south) for _ in range(rng.integers(1, 3))]
        got = rasterize_polygons(LabelPolygonSet("x", rings), g)
        lon, lat = g.centers()
        expect = np.zeros(g.shape, bool)
        for r in range(g.n_rows):
            for c in range(g.n_cols):
                expect[r, c] = any(crossing_inside(lon[r, c], lat[r, c], ring) for ring in rings)
        assert np.array_equal(got, expect)

    def test_degenerate_ring(self):
        with pytest.raises(DataError):
            LabelPolygonSet("x", [[[0, 0], [1, 1], [0, 0]]])

    def test_geojson_round_trip(self, tmp_path):
        sets = [LabelPolygonSet("fire", [[[0, 0], [1, 0], [1, 1]]]), LabelPolygonSet("fire_background", [[[2, 2], [3, 2], [3, 3], [2, 3]]])]
        save_polygons(sets, tmp_path / "l.geojson")
        back = load_polygons(tmp_path / "l.geojson")
        assert [s.class_name for s in back] == ["fire", "fire_background"]
        assert all(np.array_equal(a, b) for s, t in zip(sets, back) for a, b in zip(s.polygons, t.polygons))
        assert all(np.array_equal(r[0], r[-1]) for s in back for r in s.polygons)
