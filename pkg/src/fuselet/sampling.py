"""Neighbourhood sample extraction, standardization and k-means stratification."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fuselet.errors import DataError
from fuselet.raster import Raster

STD_FLOOR = 1e-12
NEIGHBORHOOD = 9

# Row-major offsets of the 3x3 neighbourhood: NW, N, NE, W, C, E, SW, S, SE.
OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass(frozen=True)
class SampleSet:
    """Per-pixel neighbourhood vectors.

    ``vectors`` is [n_samples, 9 * n_channels], channel-major: the nine
    neighbourhood values of channel 0 come first. ``provenance`` is an int
    array [n_samples, 3] of (scene id, row, col) of the centre pixel.
    """

    vectors: np.ndarray
    provenance: np.ndarray
    n_channels: int
    stats: ChannelStats | None = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != NEIGHBORHOOD * self.n_channels:
            raise DataError(
                f"vectors shape {self.vectors.shape} inconsistent with {self.n_channels} channels"
            )
        if self.provenance.shape != (len(self.vectors), 3):
            raise DataError("provenance must be [n_samples, 3]")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, index) -> "SampleSet":
        return replace(self, vectors=self.vectors[index], provenance=self.provenance[index])

    @classmethod
    def concatenate(cls, sets: list["SampleSet"]) -> "SampleSet":
        if not sets:
            raise DataError("nothing to concatenate")
        n_channels = sets[0].n_channels
        if any(s.n_channels != n_channels for s in sets):
            raise DataError("sample sets disagree on channel count")
        return cls(
            np.concatenate([s.vectors for s in sets]),
            np.concatenate([s.provenance for s in sets]),
            n_channels,
            sets[0].stats,
        )

    def save(self, path) -> None:
        """Little-endian float64 matrix + int64 provenance + JSON sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.vectors.astype("<f8").tofile(path.with_suffix(".vec"))
        self.provenance.astype("<i8").tofile(path.with_suffix(".prov"))
        meta = {
            "n_samples": len(self),
            "dim": self.dim,
            "n_channels": self.n_channels,
            "stats": self.stats.to_dict() if self.stats is not None else None,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "SampleSet":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        n, dim = meta["n_samples"], meta["dim"]
        vectors = np.fromfile(path.with_suffix(".vec"), dtype="<f8").reshape(n, dim)
        prov = np.fromfile(path.with_suffix(".prov"), dtype="<i8").reshape(n, 3)
        stats = ChannelStats.from_dict(meta["stats"]) if meta["stats"] else None
        return cls(vectors, prov, meta["n_channels"], stats)


def extract_neighborhoods(raster: Raster, scene_id: int = 0) -> SampleSet:
    """One sample per interior pixel whose whole 3x3 window is valid."""
    n_ch = raster.n_channels
    n_rows, n_cols = raster.shape
    if n_rows < 3 or n_cols < 3:
        return SampleSet(np.empty((0, NEIGHBORHOOD * n_ch)), np.empty((0, 3), dtype=np.int64), n_ch)

    valid = raster.valid
    ok = np.ones((n_rows - 2, n_cols - 2), dtype=bool)
    for dr, dc in OFFSETS:
        ok &= valid[1 + dr : n_rows - 1 + dr, 1 + dc : n_cols - 1 + dc]
    rows, cols = np.nonzero(ok)
    rows, cols = rows + 1, cols + 1

    values = raster.values.astype(np.float64)
    vectors = np.empty((len(rows), n_ch, NEIGHBORHOOD))
    for k, (dr, dc) in enumerate(OFFSETS):
        vectors[:, :, k] = values[:, rows + dr, cols + dc].T
    prov = np.column_stack([np.full(len(rows), scene_id), rows, cols]).astype(np.int64)
    return SampleSet(vectors.reshape(len(rows), NEIGHBORHOOD * n_ch), prov, n_ch)


def _by_channel(samples: SampleSet) -> np.ndarray:
    return samples.vectors.reshape(len(samples), samples.n_channels, NEIGHBORHOOD)


def fit_stats(samples: SampleSet) -> ChannelStats:
    """Per-channel mean and population std pooled over all nine positions."""
    if len(samples) == 0:
        raise DataError("cannot fit statistics on an empty sample set")
    x = _by_channel(samples)
    mean = x.mean(axis=(0, 2))
    std = np.sqrt(((x - mean[None, :, None]) ** 2).mean(axis=(0, 2)))
    return ChannelStats(mean, np.maximum(std, STD_FLOOR))


def _check_stats(samples: SampleSet, stats: ChannelStats):
    if stats.mean.shape != (samples.n_channels,) or stats.std.shape != (samples.n_channels,):
        raise DataError(
            f"stats cover {stats.mean.shape[0]} channels, samples have {samples.n_channels}"
        )


def standardize(samples: SampleSet, stats: ChannelStats) -> SampleSet:
    _check_stats(samples, stats)
    x = (_by_channel(samples) - stats.mean[None, :, None]) / stats.std[None, :, None]
    return replace(samples, vectors=x.reshape(len(samples), -1), stats=stats)


def destandardize(samples: SampleSet, stats: ChannelStats) -> SampleSet:
    _check_stats(samples, stats)
    x = _by_channel(samples) * stats.std[None, :, None] + stats.mean[None, :, None]
    return replace(samples, vectors=x.reshape(len(samples), -1), stats=None)


# ---------------------------------------------------------------------------
# k-means stratification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StratificationModel:
    k: int
    centroids: np.ndarray
    seed: int
    inertia_history: tuple[float, ...] = ()
    n_iter: int = 0


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Index of the nearest centroid; ties go to the lowest index."""
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), chunk):
        out[start : start + chunk] = _sq_distances(x[start : start + chunk], centroids).argmin(1)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(1))
    return centers


def _inertia(x, centroids, labels) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans_fit(samples: SampleSet | np.ndarray, k: int = 50, seed: int = 0, max_iter: int = 100) -> StratificationModel:
    """Lloyd's algorithm from a k-means++ start.

    Inertia is checked after every assignment step and must not increase.
    An emptied cluster is moved onto the point farthest from its centroid.
    """
    x = samples.vectors if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    n = len(x)
    if k < 1:
        raise DataError("k must be >= 1")
    if n < k:
        raise DataError(f"k-means needs at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = assign(x, centroids)
    history = [_inertia(x, centroids, labels)]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            dist = ((x - centroids[labels]) ** 2).sum(1)
            far = int(dist.argmax())
            centroids[j] = x[far]
            labels[far] = j
        new_labels = assign(x, centroids)
        history.append(_inertia(x, centroids, new_labels))
        tol = 1e-12 * max(history[-2], 1.0)
        if history[-1] > history[-2] + tol:
            raise AssertionError(f"k-means inertia increased: {history[-2]} -> {history[-1]}")
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return StratificationModel(k, centroids, seed, tuple(history), n_iter)


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Leftover units go to the largest fractional parts, ties to the lower index.
    """
    weights = np.asarray(weights, dtype=np.int64)
    wsum = int(weights.sum())
    if wsum == 0:
        return np.zeros_like(weights)
    # exact integer arithmetic: floor(total * w / wsum) and remainder
    prod = weights * int(total)
    base = prod // wsum
    rem = prod - base * wsum
    left = int(total - base.sum())
    order = np.lexsort((np.arange(len(weights)), -rem))
    base[order[:left]] += 1
    return base


def stratum_quotas(sizes, n_total: int) -> np.ndarray:
    """Proportional quotas capped at stratum size, deficit redistributed."""
    sizes = np.asarray(sizes, dtype=np.int64)
    n_total = min(int(n_total), int(sizes.sum()))
    quotas = np.zeros_like(sizes)
    open_ = sizes > 0
    remaining = n_total
    while remaining > 0 and open_.any():
        alloc = np.zeros_like(sizes)
        alloc[open_] = largest_remainder(sizes[open_], remaining)
        capacity = sizes - quotas
        take = np.minimum(alloc, capacity)
        quotas += take
        remaining -= int(take.sum())
        open_ = quotas < sizes
    return quotas


def stratified_sample(samples: SampleSet, model: StratificationModel, n_total: int, seed: int = 0) -> SampleSet:
    if len(samples) == 0:
        raise DataError("cannot sample from an empty sample set")
    if n_total < 1:
        raise DataError("n_total must be >= 1")
    if n_total >= len(samples):
        return samples
    labels = assign(samples.vectors, model.centroids)
    sizes = np.bincount(labels, minlength=model.k)
    quotas = stratum_quotas(sizes, n_total)
    rng = np.random.default_rng(seed)
    chosen = []
    for j in range(model.k):
        if quotas[j] == 0:
            continue
        members = np.flatnonzero(labels == j)
        chosen.append(rng.choice(members, size=int(quotas[j]), replace=False))
    index = np.sort(np.concatenate(chosen))
    return samples.subset(index)
