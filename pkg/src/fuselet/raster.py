"""
Raster container, ENVI-style BSQ I/O, nearest-neighbour collocation and
polygon rasterization.

Grids are affine lat/lon: the origin is the north-west corner of pixel (0, 0),
rows increase southward and columns eastward.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fuselet.errors import DataError

FLOAT_FILL = -9999.0
INT_FILL = np.iinfo(np.int32).min

_ENVI_DTYPES = {4: np.dtype("<f4"), 3: np.dtype("<i4"), 5: np.dtype("<f8"), 2: np.dtype("<i2"), 12: np.dtype("<u2"), 1: np.dtype("u1")}
_WRITE_CODES = {np.dtype("float32"): 4, np.dtype("int32"): 3}

# Snap tolerance (in pixel units) for nearest-centre index computation.
_SNAP = 1e-9


@dataclass(frozen=True)
class GeoGrid:
    origin_lon: float
    origin_lat: float
    pixel_width: float
    pixel_height: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise DataError(f"grid must be at least 1x1, got {self.n_rows}x{self.n_cols}")
        for name in ("pixel_width", "pixel_height"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DataError(f"{name} must be positive and finite, got {v}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def west(self) -> float:
        return self.origin_lon

    @property
    def east(self) -> float:
        return self.origin_lon + self.n_cols * self.pixel_width

    @property
    def north(self) -> float:
        return self.origin_lat

    @property
    def south(self) -> float:
        return self.origin_lat - self.n_rows * self.pixel_height

    def center(self, row, col):
        """Lon/lat of pixel centres; accepts scalars or arrays."""
        lon = self.origin_lon + (np.asarray(col) + 0.5) * self.pixel_width
        lat = self.origin_lat - (np.asarray(row) + 0.5) * self.pixel_height
        return lon, lat

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Lon and lat of every pixel centre, each shaped (n_rows, n_cols)."""
        rows, cols = np.meshgrid(np.arange(self.n_rows), np.arange(self.n_cols), indexing="ij")
        return self.center(rows, cols)

    def index_of(self, lon, lat):
        """(row, col) of the pixel containing each point, snapped against
        rounding so that points on a pixel edge go east/south."""
        col = np.floor((np.asarray(lon, dtype=float) - self.origin_lon) / self.pixel_width + _SNAP)
        row = np.floor((self.origin_lat - np.asarray(lat, dtype=float)) / self.pixel_height + _SNAP)
        return row.astype(np.int64), col.astype(np.int64)


@dataclass(frozen=True, eq=False)
class Raster:
    grid: GeoGrid
    values: np.ndarray  # [channel, row, col]
    valid: np.ndarray  # [row, col] bool
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.shape[1:] != self.grid.shape:
            raise DataError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != self.grid.shape:
            raise DataError(f"valid mask shape {valid.shape} does not match grid {self.grid.shape}")
        names = tuple(self.channel_names) or tuple(f"band_{i + 1}" for i in range(values.shape[0]))
        if len(names) != values.shape[0]:
            raise DataError(f"{len(names)} channel names for {values.shape[0]} channels")
        values.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @classmethod
    def from_mask(cls, grid: GeoGrid, mask, valid=None, name: str = "mask") -> "Raster":
        """Binary single-channel int32 raster."""
        mask = np.asarray(mask, dtype=bool)
        if valid is None:
            valid = np.ones(grid.shape, dtype=bool)
        return cls(grid, (mask & valid).astype(np.int32)[None], valid, (name,))

    def mask(self) -> np.ndarray:
        """Channel 0 as a boolean mask, false at invalid pixels."""
        return (self.values[0] != 0) & self.valid

    def equals(self, other: "Raster") -> bool:
        """Bit-exact equality of grid, mask and values at valid pixels."""
        if self.grid != other.grid or self.values.shape != other.values.shape:
            return False
        if not np.array_equal(self.valid, other.valid):
            return False
        a = np.where(self.valid, self.values, 0)
        b = np.where(other.valid, other.values, 0)
        return a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class ChannelSpec:
    """Fill value and valid range applied at load time.

    Scalars apply to every channel; sequences give one entry per channel.
    ``channels`` selects a subset of bands (0-based) in the given order.
    """

    fill: float | Sequence[float] | None = None
    valid_range: tuple[float, float] | Sequence[tuple[float, float]] | None = None
    channels: Sequence[int] | None = None


@dataclass
class LabelPolygonSet:
    class_name: str
    polygons: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.polygons = [_close_ring(r) for r in self.polygons]


def _close_ring(ring) -> np.ndarray:
    ring = np.asarray(ring, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise DataError(f"ring must be an (n, 2) array of lon/lat, got shape {ring.shape}")
    if len(np.unique(ring, axis=0)) < 3:
        raise DataError("degenerate ring: fewer than 3 distinct vertices")
    if not np.array_equal(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[:1]])
    return ring


# ---------------------------------------------------------------------------
# ENVI I/O
# ---------------------------------------------------------------------------


def _header_path(path) -> Path:
    return Path(path).with_suffix(".hdr")


def _payload_path(path) -> Path:
    return Path(path).with_suffix(".img")


def read_header(path) -> dict:
    try:
        text = _header_path(path).read_text()
    except (FileNotFoundError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read header {_header_path(path)}: {exc}") from None
    if not text.lstrip().startswith("ENVI"):
        raise DataError(f"{_header_path(path)}: not an ENVI header")
    header = {}
    # values in braces may span lines
    for m in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", text, re.MULTILINE):
        key, val = m.group(1).strip().lower(), m.group(2).strip()
        if val.startswith("{"):
            val = [v.strip() for v in val[1:-1].replace("\n", " ").split(",")]
        header[key] = val
    return header


def _grid_from_header(header: dict) -> GeoGrid:
    try:
        n_cols, n_rows = int(header["samples"]), int(header["lines"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"header missing samples/lines: {exc}") from None
    info = header.get("map info")
    if info is None:
        return GeoGrid(0.0, 0.0, 1.0, 1.0, n_rows, n_cols)
    ref_x, ref_y = float(info[1]), float(info[2])
    easting, northing = float(info[3]), float(info[4])
    pw, ph = float(info[5]), float(info[6])
    # reference pixel is 1-based, and refers to the pixel's upper-left corner
    return GeoGrid(easting - (ref_x - 1) * pw, northing + (ref_y - 1) * ph, pw, ph, n_rows, n_cols)


def _per_channel(value, n, what):
    if value is None:
        return [None] * n
    if np.ndim(value) == 0 or (what == "valid_range" and np.ndim(value) == 1):
        return [value] * n
    value = list(value)
    if len(value) != n:
        raise DataError(f"{what}: {len(value)} entries for {n} channels")
    return value


def load_raster(path, spec: ChannelSpec | None = None) -> Raster:
    """Load an ENVI BSQ raster; fill, NaN and out-of-range pixels become invalid."""
    spec = spec or ChannelSpec()
    header = read_header(path)
    grid = _grid_from_header(header)
    try:
        n_bands = int(header.get("bands", 1))
        dtype = _ENVI_DTYPES[int(header.get("data type", 4))]
    except (KeyError, ValueError):
        raise DataError(f"{path}: unsupported data type {header.get('data type')}") from None
    if header.get("interleave", "bsq").lower() != "bsq":
        raise DataError(f"{path}: only bsq interleave is supported")
    if str(header.get("byte order", "0")) == "1":
        dtype = dtype.newbyteorder(">")
    offset = int(header.get("header offset", 0))
    try:
        raw = np.fromfile(_payload_path(path), dtype=np.uint8)[offset:]
    except FileNotFoundError:
        raise DataError(f"{path}: payload {_payload_path(path)} missing") from None
    expected = n_bands * grid.n_rows * grid.n_cols * dtype.itemsize
    if raw.size != expected:
        raise DataError(f"{path}: payload is {raw.size} bytes, header implies {expected}")
    data = raw.view(dtype).reshape(n_bands, grid.n_rows, grid.n_cols)
    data = data.astype(dtype.newbyteorder("="))

    names = header.get("band names") or [f"band_{i + 1}" for i in range(n_bands)]
    if isinstance(names, str):
        names = [names]
    if len(names) != n_bands:
        raise DataError(f"{path}: {len(names)} band names for {n_bands} bands")

    channels = list(spec.channels) if spec.channels is not None else list(range(n_bands))
    if any(c < 0 or c >= n_bands for c in channels):
        raise DataError(f"{path}: channel selection {channels} out of range for {n_bands} bands")
    data = data[channels]
    names = [names[c] for c in channels]

    fill = spec.fill
    if fill is None and "data ignore value" in header:
        fill = float(header["data ignore value"])
    vrange = spec.valid_range
    if vrange is None and "valid range" in header:
        vrange = tuple(float(v) for v in header["valid range"])
    fills = _per_channel(fill, len(channels), "fill")
    ranges = _per_channel(vrange, len(channels), "valid_range")

    valid = np.ones(grid.shape, dtype=bool)
    for k in range(len(channels)):
        band = data[k]
        if band.dtype.kind == "f":
            valid &= np.isfinite(band)
        if fills[k] is not None:
            valid &= band != fills[k]
        if ranges[k] is not None:
            lo, hi = ranges[k]
            valid &= (band >= lo) & (band <= hi)
    return Raster(grid, data, valid, tuple(names))


def save_raster(raster: Raster, path, fill=None) -> None:
    """Write ``<path>.hdr`` + ``<path>.img``; invalid pixels get the fill value."""
    values = raster.values
    if values.dtype.kind in "iub":
        values = values.astype(np.int32)
        fill = INT_FILL if fill is None else int(fill)
    else:
        values = values.astype(np.float32)
        fill = FLOAT_FILL if fill is None else float(fill)
    out = np.where(raster.valid[None], values, values.dtype.type(fill)).astype(values.dtype.newbyteorder("<"))
    g = raster.grid
    lines = [
        "ENVI",
        "description = {fuselet raster}",
        f"samples = {g.n_cols}",
        f"lines = {g.n_rows}",
        f"bands = {raster.n_channels}",
        "header offset = 0",
        "file type = ENVI Standard",
        f"data type = {_WRITE_CODES[values.dtype]}",
        "interleave = bsq",
        "byte order = 0",
        f"map info = {{Geographic Lat/Lon, 1, 1, {g.origin_lon!r}, {g.origin_lat!r}, "
        f"{g.pixel_width!r}, {g.pixel_height!r}, WGS-84}}",
        "band names = {" + ", ".join(raster.channel_names) + "}",
        f"data ignore value = {fill!r}",
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _payload_path(path).write_bytes(out.tobytes())
    _header_path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Resampling and collocation
# ---------------------------------------------------------------------------


def _overlaps(a: GeoGrid, b: GeoGrid) -> bool:
    return a.west < b.east and b.west < a.east and a.south < b.north and b.south < a.north


def resample_nearest(source: Raster, target: GeoGrid) -> Raster:
    """Nearest-centre resampling. On exact ties the east/south pixel wins."""
    if not _overlaps(source.grid, target):
        raise DataError("source and target grids do not overlap")
    lon, lat = target.centers()
    row, col = source.grid.index_of(lon, lat)
    inside = (row >= 0) & (row < source.grid.n_rows) & (col >= 0) & (col < source.grid.n_cols)
    r = np.clip(row, 0, source.grid.n_rows - 1)
    c = np.clip(col, 0, source.grid.n_cols - 1)
    values = source.values[:, r, c]
    valid = inside & source.valid[r, c]
    return Raster(target, values, valid, source.channel_names)


def intersection_grid(grids: Sequence[GeoGrid]) -> GeoGrid:
    """Intersection extent sampled at the coarsest pixel size of the inputs."""
    if not grids:
        raise DataError("no grids to intersect")
    west = max(g.west for g in grids)
    east = min(g.east for g in grids)
    north = min(g.north for g in grids)
    south = max(g.south for g in grids)
    pw = max(g.pixel_width for g in grids)
    ph = max(g.pixel_height for g in grids)
    n_cols = int(math.floor((east - west) / pw + _SNAP))
    n_rows = int(math.floor((north - south) / ph + _SNAP))
    if n_cols < 1 or n_rows < 1:
        raise DataError("rasters have no common extent of at least one coarse pixel")
    return GeoGrid(west, north, pw, ph, n_rows, n_cols)


def collocate_stack(rasters: Sequence[Raster]) -> Raster:
    if not rasters:
        raise DataError("collocate_stack needs at least one raster")
    grid = intersection_grid([r.grid for r in rasters])
    parts = [resample_nearest(r, grid) for r in rasters]
    dtype = np.result_type(*[p.values.dtype for p in parts])
    values = np.concatenate([p.values.astype(dtype) for p in parts], axis=0)
    valid = np.logical_and.reduce([p.valid for p in parts])
    names = tuple(n for p in parts for n in p.channel_names)
    return Raster(grid, values, valid, names)


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------


def points_in_ring(x: np.ndarray, y: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd crossing test of points against one closed ring."""
    inside = np.zeros(np.shape(x), dtype=bool)
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        if y1 == y2:
            continue
        straddle = (y1 > y) != (y2 > y)
        xcross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (x < xcross)
    return inside


def rasterize_polygons(zones: LabelPolygonSet | Iterable[np.ndarray], grid: GeoGrid) -> np.ndarray:
    """Cells whose centre is inside any ring (even-odd per ring)."""
    rings = zones.polygons if isinstance(zones, LabelPolygonSet) else [_close_ring(r) for r in zones]
    out = np.zeros(grid.shape, dtype=bool)
    if not rings:
        return out
    lon, lat = grid.centers()
    for ring in rings:
        out |= points_in_ring(lon, lat, ring)
    return out


def load_polygons(path) -> list[LabelPolygonSet]:
    """Read a GeoJSON FeatureCollection; features are grouped by ``class_name``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise DataError(f"{path}: expected a GeoJSON FeatureCollection")
    groups: dict[str, LabelPolygonSet] = {}
    for feat in doc.get("features", []):
        name = (feat.get("properties") or {}).get("class_name")
        if name is None:
            raise DataError(f"{path}: feature without class_name property")
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            polys = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise DataError(f"{path}: unsupported geometry {geom.get('type')}")
        rings = [np.asarray(ring, dtype=float)[:, :2] for poly in polys for ring in poly]
        groups.setdefault(name, LabelPolygonSet(name)).polygons.extend(_close_ring(r) for r in rings)
    return list(groups.values())


def save_polygons(sets: Iterable[LabelPolygonSet], path) -> None:
    features = []
    for s in sets:
        for ring in s.polygons:
            features.append(
                {
                    "type": "Feature",
                    "properties": {"class_name": s.class_name},
                    "geometry": {"type": "Polygon", "coordinates": [ring.tolist()]},
                }
            )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}, indent=1))
