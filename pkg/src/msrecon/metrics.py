"""Pore-structure statistics and side-by-side comparison tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .imageops import euclidean_distance_transform, label_components
from .volume import BinaryVolume

S2_ESTIMATOR = "axis-aligned, non-periodic, mean of x/y/z"
RADIUS_APPROXIMATION = "EDT"
DECORRELATION_BAND = 0.05


def porosity(volume: BinaryVolume) -> float:
    return float(np.count_nonzero(volume.data)) / volume.data.size


def two_point_correlation(volume: BinaryVolume, max_lag: int) -> np.ndarray:
    """S2(r) for r = 0..max_lag along the coordinate axes.

    For each axis the probability that both ends of an in-domain pair at
    lag ``r`` are pore is computed without wrap-around; the three axis
    values are averaged.
    """
    max_lag = int(max_lag)
    if max_lag < 0 or max_lag >= min(volume.dims):
        raise ValueError(f"max_lag must lie in [0, {min(volume.dims) - 1}], got {max_lag}")
    d = volume.data.astype(np.int64)
    out = np.empty(max_lag + 1)
    out[0] = porosity(volume)
    for r in range(1, max_lag + 1):
        acc = 0.0
        for ax in range(3):
            a = np.moveaxis(d, ax, 0)
            n = a.shape[0] - r
            hits = int(np.sum(a[:n] * a[r:]))
            acc += hits / (n * a.shape[1] * a.shape[2])
        out[r] = acc / 3.0
    return out


def decorrelation_lag(s2: Sequence[float]) -> Optional[int]:
    """Smallest lag where S2 falls to ``p^2 + 0.05 (p - p^2)``, or None."""
    s2 = np.asarray(s2, dtype=float)
    p = s2[0]
    cut = p * p + DECORRELATION_BAND * (p - p * p)
    below = np.flatnonzero(s2 <= cut)
    return int(below[0]) if below.size else None


def cc_size_histogram(volume: BinaryVolume, connectivity: int = 26) -> dict[int, int]:
    """Number of pore components for each component size in voxels."""
    sizes = label_components(volume, connectivity).sizes()
    vals, counts = np.unique(sizes, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}


def component_radii(volume: BinaryVolume, connectivity: int = 26) -> np.ndarray:
    """Largest EDT value inside each pore component, times the voxel scale."""
    lf = label_components(volume, connectivity)
    if lf.count == 0:
        return np.zeros(0)
    edt = euclidean_distance_transform(volume)
    peak = ndimage.maximum(edt, labels=lf.labels, index=np.arange(1, lf.count + 1))
    return np.asarray(peak, dtype=float) * volume.scale


def default_radius_bins(volume: BinaryVolume, radii: np.ndarray) -> np.ndarray:
    top = float(radii.max()) if radii.size else volume.scale
    return np.arange(0.0, top + 2 * volume.scale, volume.scale)


def pore_radius_histogram(volume: BinaryVolume, bins: Optional[Sequence[float]] = None,
                          connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of per-component covering radii in micrometres.

    Radii outside the bin range are clipped into the first or last bin so
    the counts always sum to the number of components.

    Returns:
        ``(edges, counts)``.
    """
    radii = component_radii(volume, connectivity)
    edges = (default_radius_bins(volume, radii) if bins is None
             else np.asarray(bins, dtype=float))
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be at least two strictly increasing edges")
    clipped = np.clip(radii, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return edges, counts


@dataclass
class MetricsReport:
    porosity: float
    s2: list[float]
    cc_histogram: dict[int, int]
    radius_edges: list[float]
    radius_counts: list[int]
    metadata: dict = field(default_factory=dict)

    @property
    def decorrelation_lag(self) -> Optional[int]:
        return decorrelation_lag(self.s2)

    @property
    def scale(self) -> float:
        return float(self.metadata.get("scale_um", 1.0))

    @property
    def n_components(self) -> int:
        return int(sum(self.cc_histogram.values()))

    def to_dict(self) -> dict:
        return {
            "porosity": self.porosity,
            "s2": [{"lag": r, "value": v} for r, v in enumerate(self.s2)],
            "decorrelation_lag": self.decorrelation_lag,
            "cc_histogram": {str(k): v for k, v in sorted(self.cc_histogram.items())},
            "pore_radius_histogram": [
                {"lo_um": lo, "hi_um": hi, "count": c}
                for lo, hi, c in zip(self.radius_edges[:-1], self.radius_edges[1:],
                                     self.radius_counts)],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        bins = d["pore_radius_histogram"]
        edges = [b["lo_um"] for b in bins] + ([bins[-1]["hi_um"]] if bins else [])
        return cls(float(d["porosity"]), [float(e["value"]) for e in d["s2"]],
                   {int(k): int(v) for k, v in d["cc_histogram"].items()},
                   edges, [int(b["count"]) for b in bins], dict(d.get("metadata", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def s2_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lag_voxels", "lag_um", "s2"])
        for r, v in enumerate(self.s2):
            w.writerow([r, repr(r * self.scale), repr(v)])
        return buf.getvalue()

    def radius_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["radius_lo_um", "radius_hi_um", "count"])
        for lo, hi, c in zip(self.radius_edges[:-1], self.radius_edges[1:], self.radius_counts):
            w.writerow([repr(lo), repr(hi), c])
        return buf.getvalue()


def measure(volume: BinaryVolume, max_lag: Optional[int] = None,
            bins: Optional[Sequence[float]] = None, connectivity: int = 26,
            name: str = "") -> MetricsReport:
    """Compute every metric for ``volume``.

    ``max_lag`` defaults to half the smallest dimension.
    """
    if max_lag is None:
        max_lag = min(volume.dims) // 2
    max_lag = min(int(max_lag), min(volume.dims) - 1)
    edges, counts = pore_radius_histogram(volume, bins, connectivity)
    return MetricsReport(
        porosity=porosity(volume),
        s2=[float(v) for v in two_point_correlation(volume, max_lag)],
        cc_histogram=cc_size_histogram(volume, connectivity),
        radius_edges=[float(e) for e in edges],
        radius_counts=[int(c) for c in counts],
        metadata={"source": name, "scale_um": volume.scale, "dims": list(volume.dims),
                  "connectivity": connectivity, "s2_estimator": S2_ESTIMATOR,
                  "pore_radius_approximation": RADIUS_APPROXIMATION},
    )


# -------------------------------------------------------------- comparisons

def _s2_physical(report: MetricsReport, lags_um: np.ndarray) -> np.ndarray:
    x = np.arange(len(report.s2)) * report.scale
    return np.interp(lags_um, x, report.s2)


def _mean_radius(report: MetricsReport) -> float:
    e = np.asarray(report.radius_edges)
    c = np.asarray(report.radius_counts, dtype=float)
    if c.sum() == 0:
        return 0.0
    return float(((e[:-1] + e[1:]) / 2 * c).sum() / c.sum())


def _delta_row(metric: str, name: str, ref: Optional[float], cand: Optional[float]) -> dict:
    if ref is None or cand is None:
        return {"metric": metric, "candidate": name, "reference": ref, "value": cand,
                "abs_delta": None, "rel_delta": None}
    abs_d = cand - ref
    if ref != 0:
        rel = abs_d / abs(ref)
    else:
        rel = 0.0 if abs_d == 0 else None
    return {"metric": metric, "candidate": name, "reference": ref, "value": cand,
            "abs_delta": abs_d, "rel_delta": rel}


def compare(reference: MetricsReport, candidates: Sequence[MetricsReport],
            names: Optional[Sequence[str]] = None) -> list[dict]:
    """Delta table of each candidate against ``reference``.

    S2 curves are resampled (linear interpolation in micrometres) onto the
    lag grid of the coarsest voxel scale present, up to the shortest
    physical extent.  The ``s2_mad`` row is the mean absolute deviation on
    that grid; its reference value is 0.
    """
    names = list(names) if names is not None else [
        c.metadata.get("source") or f"candidate{i}" for i, c in enumerate(candidates)]
    reports = [reference, *candidates]
    step = max(r.scale for r in reports)
    extent = min((len(r.s2) - 1) * r.scale for r in reports)
    n = int(np.floor(extent / step + 1e-9)) + 1
    if n < 2:
        raise ValueError("incompatible dims after resampling: no common S2 lag beyond 0")
    lags = np.arange(n) * step
    ref_s2 = _s2_physical(reference, lags)
    ref_r = reference.decorrelation_lag
    rows = []
    for name, cand in zip(names, candidates):
        cand_s2 = _s2_physical(cand, lags)
        cand_r = cand.decorrelation_lag
        rows.append(_delta_row("porosity", name, reference.porosity, cand.porosity))
        rows.append(_delta_row("decorrelation_lag_um", name,
                               None if ref_r is None else ref_r * reference.scale,
                               None if cand_r is None else cand_r * cand.scale))
        rows.append(_delta_row("s2_mad", name, 0.0, float(np.abs(cand_s2 - ref_s2).mean())))
        rows.append(_delta_row("components", name, float(reference.n_components),
                               float(cand.n_components)))
        rows.append(_delta_row("mean_pore_radius_um", name, _mean_radius(reference),
                               _mean_radius(cand)))
    return rows


COMPARISON_COLUMNS = ("metric", "candidate", "reference", "value", "abs_delta", "rel_delta")


def comparison_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row[k] is None else (repr(row[k]) if isinstance(row[k], float)
                                                   else row[k])) for k in COMPARISON_COLUMNS})
    return buf.getvalue()


def s2_mad(a: Sequence[float], b: Sequence[float], max_lag: int) -> float:
    """Mean absolute deviation of two voxel-lag S2 curves over 0..max_lag."""
    a = np.asarray(a[: max_lag + 1])
    b = np.asarray(b[: max_lag + 1])
    if len(a) != max_lag + 1 or len(b) != max_lag + 1:
        raise ValueError(f"curves shorter than max_lag {max_lag}")
    return float(np.abs(a - b).mean())
