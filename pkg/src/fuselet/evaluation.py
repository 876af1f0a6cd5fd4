"""SSIM scoring of detection masks, difference maps and per-dataset report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fuselet.errors import DataError
from fuselet.raster import Raster

GAUSSIAN = "gaussian"
UNIFORM = "uniform"


@dataclass(frozen=True)
class SsimConfig:
    window: str = GAUSSIAN
    size: int | None = None  # 11 for gaussian, 8 for uniform
    sigma: float = 1.5
    K1: float = 0.01
    K2: float = 0.03
    L: float = 1.0

    def __post_init__(self):
        if self.window not in (GAUSSIAN, UNIFORM):
            raise DataError(f"unknown SSIM window {self.window!r}")
        if self.K1 <= 0 or self.K2 <= 0 or self.L <= 0:
            raise DataError("K1, K2 and L must be positive")

    @property
    def window_size(self) -> int:
        if self.size is not None:
            return self.size
        return 11 if self.window == GAUSSIAN else 8

    @property
    def C1(self) -> float:
        return (self.K1 * self.L) ** 2

    @property
    def C2(self) -> float:
        return (self.K2 * self.L) ** 2

    def kernel_1d(self) -> np.ndarray:
        n = self.window_size
        if self.window == UNIFORM:
            return np.full(n, 1.0 / n)
        x = np.arange(n) - (n - 1) / 2.0
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()


def _valid_filter(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable window sum over every fully interior window position."""
    n = len(k)
    x = sliding_window_view(x, n, axis=1) @ k
    return sliding_window_view(x, n, axis=0) @ k


def _single_band(r) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(r, Raster):
        if r.n_channels != 1:
            raise DataError("SSIM needs single-channel rasters")
        return r.values[0].astype(np.float64), np.asarray(r.valid)
    a = np.asarray(r, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"SSIM needs 2-D inputs, got shape {a.shape}")
    return a, np.ones(a.shape, dtype=bool)


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Per-window SSIM and the mask of windows retained (no invalid pixel)."""
    xa, va = _single_band(a)
    xb, vb = _single_band(b)
    if xa.shape != xb.shape:
        raise DataError(f"shape mismatch: {xa.shape} vs {xb.shape}")
    n = cfg.window_size
    if xa.shape[0] < n or xa.shape[1] < n:
        raise DataError(f"image {xa.shape} smaller than the {n}x{n} window")
    valid = va & vb
    xa = np.where(valid, xa, 0.0)
    xb = np.where(valid, xb, 0.0)
    k = cfg.kernel_1d()
    ones = np.ones(n)
    retained = _valid_filter((~valid).astype(np.float64), ones) == 0

    mu_a = _valid_filter(xa, k)
    mu_b = _valid_filter(xb, k)
    var_a = _valid_filter(xa * xa, k) - mu_a * mu_a
    var_b = _valid_filter(xb * xb, k) - mu_b * mu_b
    cov = _valid_filter(xa * xb, k) - mu_a * mu_b
    C1, C2 = cfg.C1, cfg.C2
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den, retained


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over retained windows (no padding)."""
    values, retained = ssim_map(a, b, cfg)
    if not retained.any():
        raise DataError("no SSIM window is free of invalid pixels")
    return float(values[retained].mean())


def jointly_valid_count(a, b) -> int:
    _, va = _single_band(a)
    _, vb = _single_band(b)
    return int((va & vb).sum())


def difference_map(detection: Raster, reference: Raster) -> Raster:
    """+1 false positive, -1 false negative, 0 agreement; invalid where either is."""
    if detection.shape != reference.shape:
        raise DataError(f"shape mismatch: {detection.shape} vs {reference.shape}")
    d = detection.values[0] != 0
    r = reference.values[0] != 0
    diff = d.astype(np.int32) - r.astype(np.int32)
    valid = detection.valid & reference.valid
    return Raster(detection.grid, np.where(valid, diff, 0)[None], valid, ("difference",))


@dataclass(frozen=True)
class EvalRow:
    dataset: str
    total_pixel_count: int
    ssim: float


def evaluate_set(pairs: Iterable[tuple[Raster, Raster, str]], cfg: SsimConfig = SsimConfig()) -> list[EvalRow]:
    """One row per dataset; SSIM is the pixel-count-weighted mean over its scenes.

    Rows keep the order in which datasets first appear.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("evaluate_set needs at least one pair")
    per: dict[str, list[tuple[int, float]]] = {}
    for det, ref, name in pairs:
        per.setdefault(name, []).append((jointly_valid_count(det, ref), ssim(det, ref, cfg)))
    rows = []
    for name, scenes in per.items():
        counts = np.array([c for c, _ in scenes], dtype=np.int64)
        scores = np.array([s for _, s in scenes])
        total = int(counts.sum())
        score = float((counts * scores).sum() / total) if total else float("nan")
        rows.append(EvalRow(name, total, score))
    return rows


CSV_HEADER = ("dataset", "total_pixel_count", "ssim")
TABLE_HEADER = ("Dataset", "Total Pixel Count", "SSIM")


def report_csv(rows: Sequence[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.dataset, r.total_pixel_count, repr(r.ssim)])
    return buf.getvalue()


def report_table(rows: Sequence[EvalRow], title: str | None = None) -> str:
    """Aligned columns in the layout of the published result tables."""
    body = [TABLE_HEADER] + [(r.dataset, str(r.total_pixel_count), f"{r.ssim:.2f}") for r in rows]
    widths = [max(len(line[i]) for line in body) for i in range(3)]
    lines = [title] if title else []
    for k, line in enumerate(body):
        lines.append("  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(line)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def read_report_csv(path) -> list[EvalRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise DataError(f"{path}: unexpected report header {reader.fieldnames}")
        return [EvalRow(r["dataset"], int(r["total_pixel_count"]), float(r["ssim"])) for r in reader]


def write_report(rows: Sequence[EvalRow], path, title: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".csv").write_text(report_csv(rows))
    path.with_suffix(".txt").write_text(report_table(rows, title))
