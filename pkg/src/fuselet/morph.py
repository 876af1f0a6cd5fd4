"""
Detection objects from pixel masks: Suzuki-Abe border following
(8-connected foreground, 4-connected background), scanline contour filling
and component size filtering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from fuselet.errors import DataError
from fuselet.raster import GeoGrid, Raster, points_in_ring

OUTER = "outer"
HOLE = "hole"

# Neighbour offsets in clockwise screen order (rows grow downward).
_DIRS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]
_DIR_INDEX = {d: k for k, d in enumerate(_DIRS)}
_EAST, _WEST = 0, 4

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Contour:
    points: tuple[tuple[int, int], ...]  # (row, col)
    kind: str

    def __len__(self):
        return len(self.points)


def _as_mask(mask) -> np.ndarray:
    if isinstance(mask, Raster):
        return mask.mask()
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def _like(template, mask: np.ndarray):
    if isinstance(template, Raster):
        return Raster.from_mask(template.grid, mask, template.valid, template.channel_names[0])
    return mask


def _follow(f: np.ndarray, i: int, j: int, start: int, nbd: int) -> list[tuple[int, int]]:
    for k in range(8):
        d = (start + k) % 8
        if f[i + _DIRS[d][0], j + _DIRS[d][1]] != 0:
            i1, j1 = i + _DIRS[d][0], j + _DIRS[d][1]
            break
    else:
        f[i, j] = -nbd
        return [(i, j)]

    points = []
    i2, j2, i3, j3 = i1, j1, i, j
    while True:
        points.append((i3, j3))
        back = _DIR_INDEX[(i2 - i3, j2 - j3)]
        east_zero = False
        for k in range(1, 9):
            d = (back - k) % 8
            r, c = i3 + _DIRS[d][0], j3 + _DIRS[d][1]
            if f[r, c] != 0:
                i4, j4 = r, c
                break
            if d == _EAST:
                east_zero = True
        if east_zero:
            f[i3, j3] = -nbd
        elif f[i3, j3] == 1:
            f[i3, j3] = nbd
        if (i4, j4) == (i, j) and (i3, j3) == (i1, j1):
            return points
        i2, j2, i3, j3 = i3, j3, i4, j4


def trace_borders(mask) -> list[Contour]:
    """All outer and hole borders, in raster-scan order of their start pixel.

    Outer borders run counter-clockwise on screen (down the left side first).
    """
    m = _as_mask(mask)
    n_rows, n_cols = m.shape
    f = np.zeros((n_rows + 2, n_cols + 2), dtype=np.int64)
    f[1:-1, 1:-1] = m
    contours = []
    nbd = 1
    for i in range(1, n_rows + 1):
        row = f[i]
        for j in np.flatnonzero(row[1:-1]) + 1:
            fij = f[i, j]
            if fij == 1 and f[i, j - 1] == 0:
                kind, start = OUTER, _WEST
            elif fij >= 1 and f[i, j + 1] == 0:
                kind, start = HOLE, _EAST
            else:
                continue
            nbd += 1
            pts = _follow(f, i, int(j), start, nbd)
            contours.append(Contour(tuple((r - 1, c - 1) for r, c in pts), kind))
    return contours


def _interior(contour: Contour, shape) -> tuple[slice, slice, np.ndarray]:
    """Even-odd interior of the polygon through the contour's pixel centres,
    restricted to its bounding box. Contour pixels themselves are excluded."""
    pts = np.asarray(contour.points)
    r0, c0 = pts.min(0)
    r1, c1 = pts.max(0)
    box = (slice(r0, r1 + 1), slice(c0, c1 + 1))
    if len(pts) < 3:
        return box, np.zeros((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
    rows, cols = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    ring = np.vstack([pts[:, ::-1], pts[:1, ::-1]]).astype(float)  # (x=col, y=row)
    inside = points_in_ring(cols.astype(float), rows.astype(float), ring)
    inside[pts[:, 0] - r0, pts[:, 1] - c0] = False
    return box, inside


def fill_contours(contours: list[Contour], shape, preserve_holes: bool = False):
    """Scanline even-odd fill of outer contours.

    By default holes are closed. With ``preserve_holes`` the strict interior
    of each hole contour is removed again (nested objects are restored).
    ``shape`` is a (rows, cols) tuple or a GeoGrid; a GeoGrid yields a Raster.
    """
    grid = shape if isinstance(shape, GeoGrid) else None
    shape = grid.shape if grid is not None else tuple(shape)
    depth = np.zeros(shape, dtype=np.int64)
    for contour in contours:
        if not contour.points:
            continue
        pts = np.asarray(contour.points)
        if pts.min() < 0 or (pts >= np.asarray(shape)).any():
            raise DataError("contour point outside grid")
        if contour.kind == OUTER:
            box, inside = _interior(contour, shape)
            depth[box] += inside
            # fancy-index += counts a revisited pixel once
            depth[pts[:, 0], pts[:, 1]] += 1
        elif preserve_holes:
            box, inside = _interior(contour, shape)
            depth[box] -= inside
    out = depth > 0
    if grid is not None:
        return Raster.from_mask(grid, out)
    return out


def filter_by_area(mask, min_area: int = 0, max_area: int | None = None):
    """Drop 8-connected components smaller than min_area or larger than max_area."""
    if min_area < 0:
        raise DataError("min_area must be >= 0")
    if max_area is not None and min_area > max_area:
        raise DataError(f"min_area {min_area} > max_area {max_area}")
    m = _as_mask(mask)
    labels, n = ndimage.label(m, structure=EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    if max_area is not None:
        keep &= sizes <= max_area
    keep[0] = False
    return _like(mask, keep[labels])


def close_holes(mask) -> np.ndarray:
    """Foreground plus every background pixel not 4-connected to the image border."""
    m = _as_mask(mask)
    return fill_contours([c for c in trace_borders(m) if c.kind == OUTER], m.shape)


def build_objects(mask, min_area: int = 2, max_area: int | None = None, preserve_holes: bool = False):
    """trace -> fill -> size filter; invalid pixels of a Raster input stay invalid."""
    m = _as_mask(mask)
    filled = fill_contours(trace_borders(m), m.shape, preserve_holes)
    if isinstance(mask, Raster):
        filled &= mask.valid
    return _like(mask, _as_mask(filter_by_area(filled, min_area, max_area)))


def contours_to_geojson(contours: list[Contour], path=None) -> dict:
    """Line strings in grid coordinates (x = col, y = row)."""
    features = [
        {
            "type": "Feature",
            "properties": {"kind": c.kind},
            "geometry": {"type": "LineString", "coordinates": [[col, row] for row, col in c.points + c.points[:1]]},
        }
        for c in contours
    ]
    doc = {"type": "FeatureCollection", "features": features}
    if path is not None:
        Path(path).write_text(json.dumps(doc))
    return doc
