"""
Deterministic synthetic fire/smoke scenes with exact truth masks and
high-certainty label rectangles, for desk-scale end-to-end runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from fuselet.errors import DataError
from fuselet.raster import GeoGrid, LabelPolygonSet, Raster, save_polygons, save_raster

LN2 = np.log(2.0)
EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SceneSpec:
    n_rows: int = 128
    n_cols: int = 128
    n_vis_channels: int = 4
    n_thermal_channels: int = 2
    n_fires: int = 2
    n_plumes: int = 2
    seed: int = 0
    terrain_roughness: float = 0.5
    fire_intensity: float = 8.0
    smoke_opacity: float = 3.0
    fire_radius: tuple[float, float] = (4.0, 6.0)
    plume_length: tuple[float, float] = (40.0, 60.0)
    plume_width: tuple[float, float] = (7.0, 10.0)
    origin_lon: float = -120.0
    origin_lat: float = 48.0
    pixel_size: float = 0.001

    def __post_init__(self):
        if self.n_rows < 32 or self.n_cols < 32:
            raise DataError("synthetic scenes must be at least 32x32")
        if min(self.n_vis_channels, self.n_thermal_channels, self.n_fires, self.n_plumes) < 0:
            raise DataError("channel and object counts must be >= 0")
        if self.n_plumes > 0 and self.n_fires == 0:
            raise DataError("plumes are anchored on fires; n_plumes > 0 needs n_fires > 0")

    @property
    def grid(self) -> GeoGrid:
        return GeoGrid(self.origin_lon, self.origin_lat, self.pixel_size, self.pixel_size, self.n_rows, self.n_cols)


@dataclass(frozen=True, eq=False)
class Scene:
    raster: Raster
    truth_fire: np.ndarray
    truth_smoke: np.ndarray
    labels: list[LabelPolygonSet]

    def truth(self, class_name: str) -> Raster:
        m = {"fire": self.truth_fire, "smoke": self.truth_smoke}[class_name]
        return Raster.from_mask(self.raster.grid, m, name=f"truth_{class_name}")


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return f / f.std()


def _place_fires(spec: SceneSpec, rng) -> list[tuple[float, float, float]]:
    fires = []
    lo, hi = spec.fire_radius
    for _ in range(spec.n_fires):
        for _attempt in range(2000):
            radius = rng.uniform(lo, hi)
            margin = radius + 8
            r = rng.uniform(margin, spec.n_rows - margin)
            c = rng.uniform(margin, spec.n_cols - margin)
            if all(np.hypot(r - fr, c - fc) > radius + fR + 12 for fr, fc, fR in fires):
                fires.append((r, c, radius))
                break
        else:
            raise DataError(f"cannot place {spec.n_fires} fires in a {spec.n_rows}x{spec.n_cols} scene")
    return fires


def _plume_profile(spec: SceneSpec, rng, rows, cols, anchor) -> np.ndarray:
    fr, fc, fR = anchor
    for _attempt in range(2000):
        length = rng.uniform(*spec.plume_length)
        width = rng.uniform(*spec.plume_width)
        theta = rng.uniform(0, 2 * np.pi)
        end_r = fr + np.sin(theta) * length
        end_c = fc + np.cos(theta) * length
        if 4 <= end_r <= spec.n_rows - 4 and 4 <= end_c <= spec.n_cols - 4:
            break
    else:
        raise DataError("cannot fit a plume inside the scene")
    # start a little upwind of the fire centre so the plume covers part of the fire
    start_r = fr - np.sin(theta) * 0.5 * fR
    start_c = fc - np.cos(theta) * 0.5 * fR
    du, dv = rows - start_r, cols - start_c
    along = du * np.sin(theta) + dv * np.cos(theta)
    across = -du * np.cos(theta) + dv * np.sin(theta)
    half = length / 2
    w = 0.5 * width * (0.6 + 0.4 * np.clip(along / length, 0, 1))
    prof = np.exp(-LN2 * (np.abs(along - half) / half) ** 4) * np.exp(-LN2 * (np.abs(across) / w) ** 4)
    return ndimage.gaussian_filter(prof, 0.8)


def largest_rectangle(region: np.ndarray) -> tuple[int, int, int, int] | None:
    """Largest axis-aligned all-true rectangle as inclusive (r0, c0, r1, c1)."""
    n_rows, n_cols = region.shape
    heights = np.zeros(n_cols, dtype=np.int64)
    best, best_area = None, 0
    for r in range(n_rows):
        heights = np.where(region[r], heights + 1, 0)
        stack: list[int] = []
        for c in range(n_cols + 1):
            h = heights[c] if c < n_cols else 0
            while stack and heights[stack[-1]] >= h:
                top = stack.pop()
                height = heights[top]
                left = stack[-1] + 1 if stack else 0
                area = height * (c - left)
                if area > best_area:
                    best_area = area
                    best = (r - height + 1, left, r, c - 1)
            stack.append(c)
    return best


def _rectangles(region: np.ndarray, max_rects: int, min_area: int) -> list[tuple[int, int, int, int]]:
    region = region.copy()
    rects = []
    for _ in range(max_rects):
        rect = largest_rectangle(region)
        if rect is None:
            break
        r0, c0, r1, c1 = rect
        if (r1 - r0 + 1) * (c1 - c0 + 1) < min_area:
            break
        rects.append(rect)
        region[r0 : r1 + 1, c0 : c1 + 1] = False
    return rects


def rectangle_ring(grid: GeoGrid, rect) -> np.ndarray:
    """Lon/lat ring along the outer pixel edges of an inclusive pixel rectangle."""
    r0, c0, r1, c1 = rect
    west = grid.origin_lon + c0 * grid.pixel_width
    east = grid.origin_lon + (c1 + 1) * grid.pixel_width
    north = grid.origin_lat - r0 * grid.pixel_height
    south = grid.origin_lat - (r1 + 1) * grid.pixel_height
    return np.array([[west, north], [east, north], [east, south], [west, south], [west, north]])


def _class_rects(truth: np.ndarray, per_component: int, min_area: int) -> list:
    core = ndimage.binary_erosion(truth, EIGHT)
    labels, n = ndimage.label(core, structure=EIGHT)
    rects = []
    for k in range(1, n + 1):
        rects += _rectangles(labels == k, per_component, min_area)
    return rects


def _background_rects(truth: np.ndarray, max_rects: int, min_area: int, margin: int = 3) -> list:
    region = ~ndimage.binary_dilation(truth, EIGHT, iterations=margin) if truth.any() else np.ones_like(truth)
    return _rectangles(region, max_rects, min_area)


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    shape = (spec.n_rows, spec.n_cols)
    rows, cols = np.mgrid[0 : spec.n_rows, 0 : spec.n_cols].astype(float)

    terrain = _smooth_field(rng, shape, 6.0)
    n_vis, n_th = spec.n_vis_channels, spec.n_thermal_channels
    channels = []
    for k in range(n_vis):
        own = _smooth_field(rng, shape, 3.0)
        base = 1.0 - 0.15 * k
        channels.append(base + spec.terrain_roughness * (0.7 * terrain + 0.3 * own))
    for k in range(n_th):
        own = _smooth_field(rng, shape, 3.0)
        base = 3.0 - 0.4 * k
        channels.append(base + spec.terrain_roughness * (0.5 * terrain + 0.5 * own))
    values = np.stack(channels) if channels else np.zeros((0,) + shape)
    values = values + 0.05 * spec.terrain_roughness * rng.standard_normal(values.shape)

    fires = _place_fires(spec, rng)
    fire_prof = np.zeros(shape)
    for r, c, radius in fires:
        d = np.hypot(rows - r, cols - c)
        fire_prof = np.maximum(fire_prof, np.exp(-LN2 * (d / radius) ** 6))
    smoke_prof = np.zeros(shape)
    for p in range(spec.n_plumes):
        smoke_prof = np.maximum(smoke_prof, _plume_profile(spec, rng, rows, cols, fires[p % len(fires)]))

    for k in range(n_vis):
        values[k] += spec.smoke_opacity * (1.0 - 0.12 * k) * smoke_prof
    for k in range(n_th):
        values[n_vis + k] += spec.fire_intensity * (1.0 - 0.2 * k) * fire_prof

    truth_fire = fire_prof >= 0.5
    truth_smoke = smoke_prof >= 0.5
    if truth_fire.any() and (~truth_fire).any():
        for k in range(n_th):
            band = values[n_vis + k]
            if band[truth_fire].min() <= np.percentile(band[~truth_fire], 99):
                raise DataError("fire_intensity too low: fire pixels not above the background 99th percentile")

    grid = spec.grid
    names = tuple(f"vis_{k + 1}" for k in range(n_vis)) + tuple(f"tir_{k + 1}" for k in range(n_th))
    raster = Raster(grid, values.astype(np.float32), np.ones(shape, dtype=bool), names)

    def polygons(name, rects):
        return LabelPolygonSet(name, [rectangle_ring(grid, r) for r in rects])

    labels = [
        polygons("fire", _class_rects(truth_fire, 2, 2)),
        polygons("fire_background", _background_rects(truth_fire, 4, 25)),
        polygons("smoke", _class_rects(truth_smoke, 3, 6)),
        polygons("smoke_background", _background_rects(truth_smoke, 4, 25)),
    ]
    return Scene(raster, truth_fire, truth_smoke, labels)


def write_scene(scene: Scene, directory, name: str) -> dict[str, Path]:
    """Scene raster, truth masks and label GeoJSON under ``directory``."""
    directory = Path(directory)
    paths = {
        "raster": directory / f"{name}.img",
        "truth_fire": directory / f"{name}_truth_fire.img",
        "truth_smoke": directory / f"{name}_truth_smoke.img",
        "labels": directory / f"{name}_labels.geojson",
    }
    save_raster(scene.raster, paths["raster"])
    save_raster(scene.truth("fire"), paths["truth_fire"])
    save_raster(scene.truth("smoke"), paths["truth_smoke"])
    save_polygons(scene.labels, paths["labels"])
    return paths
