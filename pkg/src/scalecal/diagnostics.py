"""Per-stage activation distributions across input scales and their divergence.

Records aggregate every element of a stage-end activation over a data slice
into a fixed-range histogram (outliers clamped into the edge bins) plus exact
running mean/variance.  Divergences compare the histograms of two scales.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import AugmentConfig, Dataset, normalize
from .pipeline import resolve_bank
from .resample import ScaleSet, bilinear_resize
from .tensor import Tensor

DEFAULT_BINS = 64
DEFAULT_RANGE = (-8.0, 8.0)
METRICS = ("sym-kl", "w1")

DIST_HEADER = ["stage", "scale", "bin_center", "count",
               "size", "bin_low", "bin_high", "sample_count", "mean", "variance"]
DIV_HEADER = ["stage", "scale_a", "scale_b", "metric", "value"]


@dataclass
class StageDistributionRecord:
    stage_index: int
    scale_index: int
    size: tuple
    histogram: np.ndarray
    value_range: tuple = DEFAULT_RANGE
    sample_count: int = 0
    mean: float = 0.0
    variance: float = 0.0

    @property
    def bins(self) -> int:
        return len(self.histogram)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.value_range[0], self.value_range[1], self.bins + 1)

    @property
    def bin_centers(self) -> np.ndarray:
        e = self.bin_edges
        return (e[:-1] + e[1:]) / 2

    def add(self, values: np.ndarray) -> None:
        """Fold a batch of activations in (Chan's parallel mean/variance merge)."""
        v = values.astype(np.float64).ravel()
        n = v.size
        if n == 0:
            return
        lo, hi = self.value_range
        counts, _ = np.histogram(np.clip(v, lo, hi), bins=self.bins, range=(lo, hi))
        self.histogram = self.histogram + counts
        bmean = v.mean()
        bm2 = ((v - bmean) ** 2).sum()
        tot = self.sample_count + n
        delta = bmean - self.mean
        m2 = self.variance * self.sample_count + bm2 + delta**2 * self.sample_count * n / tot
        self.mean = self.mean + delta * n / tot
        self.variance = max(m2 / tot, 0.0)
        self.sample_count = tot


def _empty_record(stage: int, scale: int, size, bins: int, value_range) -> StageDistributionRecord:
    return StageDistributionRecord(stage, scale, tuple(size), np.zeros(bins, dtype=np.int64),
                                   tuple(value_range))


def probe_activations(model, dataset_slice, scale_set: ScaleSet,
                      augment_cfg: Optional[AugmentConfig] = None, batch_size: int = 128,
                      bins: int = DEFAULT_BINS, value_range=DEFAULT_RANGE,
                      preact: bool = False, nearest_bank: bool = False) -> list:
    """Eval-mode stage-end activation records for every (scale, stage) pair.

    S-BN models use each scale's own bank, i.e. what inference computes.
    """
    if not hasattr(model, "enable_probe"):
        raise ValueError("model has no stage taps to probe")
    images = dataset_slice.images if isinstance(dataset_slice, Dataset) else np.asarray(dataset_slice)
    if len(images) == 0:
        raise ValueError("probe slice is empty")
    augment_cfg = augment_cfg or AugmentConfig()
    records = []
    model.eval()
    model.enable_probe(True, preact)
    try:
        for si, size in enumerate(scale_set):
            bank = resolve_bank(model, size, nearest_bank)
            cells: list = []
            for start in range(0, len(images), batch_size):
                x = Tensor(normalize(images[start : start + batch_size], augment_cfg))
                model.forward_features(bilinear_resize(x, size), bank or 0)
                if not cells:
                    cells = [_empty_record(s, si, size, bins, value_range) for s in range(len(model.taps))]
                for rec, act in zip(cells, model.taps):
                    rec.add(act)
            records.extend(cells)
    finally:
        model.enable_probe(False)
    return records


def _normalized(rec: StageDistributionRecord, smooth: float = 0.0) -> np.ndarray:
    h = rec.histogram.astype(np.float64) + smooth
    total = h.sum()
    if total <= 0:
        raise ValueError(f"record stage={rec.stage_index} scale={rec.scale_index} is empty")
    return h / total


def distribution_divergence(a: StageDistributionRecord, b: StageDistributionRecord,
                            metric: str = "sym-kl") -> float:
    """Symmetric KL over add-one smoothed histograms, or discrete 1-Wasserstein."""
    if a.bins != b.bins or tuple(a.value_range) != tuple(b.value_range):
        raise ValueError(f"records use different binning: {a.bins} bins over {a.value_range} "
                         f"vs {b.bins} bins over {b.value_range}")
    if metric == "sym-kl":
        p, q = _normalized(a, 1.0), _normalized(b, 1.0)
        return float(max(np.sum((p - q) * np.log(p / q)), 0.0))
    if metric == "w1":
        p, q = _normalized(a), _normalized(b)
        width = (a.value_range[1] - a.value_range[0]) / a.bins
        return float(np.abs(np.cumsum(p - q)[:-1]).sum() * width)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass
class DivergenceReport:
    metric_name: str
    entries: list = field(default_factory=list)  # (stage, (scale_a, scale_b), value)

    def value(self, stage: int, pair=(0, 1)) -> float:
        for s, p, v in self.entries:
            if s == stage and tuple(p) == tuple(pair):
                return v
        raise KeyError((stage, pair))


def divergence_report(records: Sequence[StageDistributionRecord], metric: str = "sym-kl") -> DivergenceReport:
    by_key = {(r.stage_index, r.scale_index): r for r in records}
    stages = sorted({r.stage_index for r in records})
    scales = sorted({r.scale_index for r in records})
    report = DivergenceReport(metric)
    for s in stages:
        for a, b in itertools.combinations(scales, 2):
            report.entries.append((s, (a, b), distribution_divergence(by_key[s, a], by_key[s, b], metric)))
    return report


def emit_report(records: Sequence[StageDistributionRecord], reports: Sequence[DivergenceReport],
                path) -> tuple:
    """Write ``distributions.csv`` and ``divergence.csv`` under ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        dist_path, div_path = out / "distributions.csv", out / "divergence.csv"
        with open(dist_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(DIST_HEADER)
            for r in records:
                size = f"{r.size[0]}x{r.size[1]}"
                for c, n in zip(r.bin_centers, r.histogram):
                    w.writerow([r.stage_index, r.scale_index, repr(float(c)), int(n), size,
                                repr(float(r.value_range[0])), repr(float(r.value_range[1])),
                                r.sample_count, repr(float(r.mean)), repr(float(r.variance))])
        with open(div_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(DIV_HEADER)
            for rep in reports:
                for stage, (a, b), v in rep.entries:
                    w.writerow([stage, a, b, rep.metric_name, repr(float(v))])
    except OSError as e:
        raise OSError(f"cannot write diagnostics to {out}: {e}") from e
    return dist_path, div_path


def read_distributions(path) -> list:
    groups: dict = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (int(row["stage"]), int(row["scale"]))
            groups.setdefault(key, []).append(row)
    records = []
    for (stage, scale), rows in groups.items():
        first = rows[0]
        h, w = (int(v) for v in first["size"].split("x"))
        records.append(StageDistributionRecord(
            stage, scale, (h, w), np.array([int(r["count"]) for r in rows], dtype=np.int64),
            (float(first["bin_low"]), float(first["bin_high"])), int(first["sample_count"]),
            float(first["mean"]), float(first["variance"])))
    return records


def read_divergence(path) -> list:
    with open(path, newline="") as f:
        return [(int(r["stage"]), int(r["scale_a"]), int(r["scale_b"]), r["metric"], float(r["value"]))
                for r in csv.DictReader(f)]


def overlay_series(records: Sequence[StageDistributionRecord], rebin: int = 1) -> list:
    """Rows ``(stage, bin_center, density per scale...)`` merging ``rebin`` adjacent bins."""
    if rebin < 1:
        raise ValueError("rebin factor must be >= 1")
    stages = sorted({r.stage_index for r in records})
    scales = sorted({r.scale_index for r in records})
    by_key = {(r.stage_index, r.scale_index): r for r in records}
    rows = []
    for s in stages:
        recs = [by_key[s, k] for k in scales]
        nb = recs[0].bins // rebin
        edges = recs[0].bin_edges[: nb * rebin + 1 : rebin]
        width = edges[1] - edges[0]
        dens = []
        for r in recs:
            h = r.histogram[: nb * rebin].reshape(nb, rebin).sum(axis=1).astype(np.float64)
            dens.append(h / max(h.sum(), 1) / width)
        for k in range(nb):
            rows.append([s, (edges[k] + edges[k + 1]) / 2] + [d[k] for d in dens])
    return rows
