"""Zonal histograms of segmentation maps under label polygons, and cluster-to-class assignment."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from fuselet.errors import DataError
from fuselet.iic import SegmentationMap
from fuselet.raster import LabelPolygonSet, Raster, rasterize_polygons

BACKGROUND_SUFFIX = "_background"


def background_of(class_name: str) -> str:
    return class_name + BACKGROUND_SUFFIX


@dataclass
class ZonalCounts:
    counts: dict[str, dict[int, int]] = field(default_factory=dict)
    scenes_seen: list[str] = field(default_factory=list)

    def total(self, class_name: str) -> int:
        return sum(self.counts.get(class_name, {}).values())

    def to_dict(self) -> dict:
        return {
            "counts": {
                c: {str(k): v for k, v in sorted(labels.items())} for c, labels in sorted(self.counts.items())
            },
            "scenes_seen": list(self.scenes_seen),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ZonalCounts":
        counts = {c: {int(k): int(v) for k, v in labels.items()} for c, labels in d.get("counts", {}).items()}
        return cls(counts, list(d.get("scenes_seen", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ZonalCounts":
        return cls.from_dict(json.loads(Path(path).read_text()))


def zonal_histogram(segmap: SegmentationMap, zones: LabelPolygonSet | Iterable[LabelPolygonSet], scene: str = "") -> ZonalCounts:
    """Per class, the histogram of composed labels over valid pixels inside its polygons."""
    if isinstance(zones, LabelPolygonSet):
        zones = [zones]
    counts: dict[str, dict[int, int]] = {}
    for zone in zones:
        inside = rasterize_polygons(zone, segmap.grid) & segmap.valid
        labels, n = np.unique(segmap.labels[inside], return_counts=True)
        per_class = counts.setdefault(zone.class_name, {})
        for label, c in zip(labels.tolist(), n.tolist()):
            per_class[label] = per_class.get(label, 0) + c
    return ZonalCounts(counts, [scene] if scene else [])


def merge_counts(a: ZonalCounts, b: ZonalCounts) -> ZonalCounts:
    merged = {}
    for name in sorted(set(a.counts) | set(b.counts)):
        total = Counter(a.counts.get(name, {}))
        total.update(b.counts.get(name, {}))
        merged[name] = dict(total)
    return ZonalCounts(merged, a.scenes_seen + b.scenes_seen)


def assign_context(counts: ZonalCounts, target: str, background: str | None = None, tau: float = 0.5) -> set[int]:
    """Labels whose target share of (target + background) overlap strictly exceeds tau."""
    if not 0 <= tau < 1:
        raise DataError(f"tau must lie in [0, 1), got {tau}")
    background = background or background_of(target)
    tgt = counts.counts.get(target, {})
    bkg = counts.counts.get(background, {})
    assigned = set()
    for label in set(tgt) | set(bkg):
        t, b = tgt.get(label, 0), bkg.get(label, 0)
        if t + b > 0 and t / (t + b) > tau:
            assigned.add(label)
    return assigned


@dataclass
class ContextTable:
    assignments: dict[str, set[int]]
    tau: float = 0.5
    level: str = "leaf"

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "level": self.level,
            "assignments": {k: sorted(v) for k, v in sorted(self.assignments.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContextTable":
        return cls({k: set(v) for k, v in d["assignments"].items()}, d.get("tau", 0.5), d.get("level", "leaf"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ContextTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def to_root_level(counts: ZonalCounts, c_child: int) -> ZonalCounts:
    """Collapse composed labels to their root label."""
    out = {}
    for name, labels in counts.counts.items():
        agg: dict[int, int] = {}
        for label, n in labels.items():
            agg[label // c_child] = agg.get(label // c_child, 0) + n
        out[name] = agg
    return ZonalCounts(out, list(counts.scenes_seen))


def build_context_table(counts: ZonalCounts, classes: Iterable[str], tau: float = 0.5,
                        level: str = "leaf", c_child: int | None = None) -> ContextTable:
    if level == "root":
        if c_child is None:
            raise DataError("root-level assignment needs c_child")
        counts = to_root_level(counts, c_child)
    elif level != "leaf":
        raise DataError(f"unknown assignment level {level!r}")
    return ContextTable({c: assign_context(counts, c, background_of(c), tau) for c in classes}, tau, level)


def extract_mask(segmap: SegmentationMap, assigned: Iterable[int], level: str = "leaf", name: str = "mask") -> Raster:
    """Binary raster of valid pixels whose label is in ``assigned``."""
    labels = segmap.labels if level == "leaf" else segmap.labels // segmap.c_child
    assigned = np.fromiter(sorted(set(assigned)), dtype=np.int64)
    hit = np.isin(labels, assigned) & segmap.valid
    return Raster.from_mask(segmap.grid, hit, segmap.valid, name)
