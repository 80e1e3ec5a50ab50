"""Slice metrics, per-cloud-type breakdown and geographic aggregation.

All slice metrics take normalized reflectivity arrays [Z, L] (0 <-> -25 dBZ,
1 <-> +20 dBZ).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sample_store import DBZ_RANGE, SceneSample
from .synth import CLOUD_THRESHOLD

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def rmse_dbz(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(DBZ_RANGE * np.sqrt(np.mean((p - t) ** 2)))


def percent_error(pred, target) -> float:
    """Range-relative mean absolute error, in percent."""
    p, t = _pair(pred, target)
    return float(100.0 * np.mean(np.abs(p - t)) / 1.0)


def psnr(pred, target, data_range: float = 1.0) -> float:
    p, t = _pair(pred, target)
    mse = np.mean((p - t) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _valid_filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = len(w)
    x = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(x, n, axis=1) @ w


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM averaged over all fully-contained window positions."""
    p, t = _pair(pred, target)
    if p.ndim != 2:
        raise ValueError("ssim expects 2D slices")
    if min(p.shape) < SSIM_WINDOW:
        raise ValueError(f"slice {p.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    mu_p, mu_t = _valid_filter(p, w), _valid_filter(t, w)
    s_pp = _valid_filter(p * p, w) - mu_p ** 2
    s_tt = _valid_filter(t * t, w) - mu_t ** 2
    s_pt = _valid_filter(p * t, w) - mu_p * mu_t
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_p * mu_t + c1) * (2 * s_pt + c2)
    den = (mu_p ** 2 + mu_t ** 2 + c1) * (s_pp + s_tt + c2)
    return float(np.mean(num / den))


def _binary_f1(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    tp = np.count_nonzero(pred_mask & true_mask)
    fp = np.count_nonzero(pred_mask & ~true_mask)
    fn = np.count_nonzero(~pred_mask & true_mask)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def cloud_mask_f1(pred, target, cloud_type=None, threshold: float = CLOUD_THRESHOLD):
    """(f1, f1_weighted) of the cloud mask at ``threshold``.

    ``f1_weighted`` averages the F1 computed separately within the columns
    of each true cloud type, weighted by that type's count of true cloudy
    pixels. Without types, or without any true cloud, it equals ``f1``.
    """
    p, t = _pair(pred, target)
    pm, tm = p > threshold, t > threshold
    f1 = _binary_f1(pm, tm)
    if cloud_type is None:
        return f1, f1
    types = np.asarray(cloud_type)
    scores, weights = [], []
    for code in np.unique(types):
        cols = types == code
        support = np.count_nonzero(tm[:, cols])
        if support:
            scores.append(_binary_f1(pm[:, cols], tm[:, cols]))
            weights.append(support)
    if not weights:
        return f1, f1
    return f1, float(np.average(scores, weights=weights))


def rmse_by_type(pred, target, cloud_type) -> dict[int, float]:
    """RMSE (dBZ) restricted to the columns of each cloud type present."""
    p, t = _pair(pred, target)
    types = np.asarray(cloud_type)
    return {int(code): rmse_dbz(p[:, types == code], t[:, types == code]) for code in np.unique(types)}


@dataclass
class EvalRecord:
    sample_id: str
    rmse_dbz: float
    percent_error: float
    psnr: float
    ssim: float
    f1: float
    f1_weighted: float
    per_type_rmse: dict[int, float]
    location: tuple[float, float]
    month: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_type_rmse"] = {str(k): v for k, v in self.per_type_rmse.items()}
        d["location"] = list(self.location)
        if not np.isfinite(d["psnr"]):
            d["psnr"] = None
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "EvalRecord":
        doc = dict(doc)
        doc["per_type_rmse"] = {int(k): float(v) for k, v in doc["per_type_rmse"].items()}
        doc["location"] = tuple(doc["location"])
        if doc["psnr"] is None:
            doc["psnr"] = float("inf")
        return cls(**doc)


def evaluate_slice(pred_slice, sample: SceneSample, threshold: float = CLOUD_THRESHOLD) -> EvalRecord:
    track = sample.track
    if track is None:
        raise ValueError(f"sample {sample.id} has no track")
    target = track.reflectivity
    pred = np.clip(np.asarray(pred_slice, dtype=np.float64), 0.0, 1.0)
    f1, f1w = cloud_mask_f1(pred, target, track.cloud_type, threshold)
    mid = track.pixel_path[track.length // 2]
    loc = (float(sample.latlon[0, mid[0], mid[1]]), float(sample.latlon[1, mid[0], mid[1]]))
    return EvalRecord(
        sample_id=sample.id,
        rmse_dbz=rmse_dbz(pred, target),
        percent_error=percent_error(pred, target),
        psnr=psnr(pred, target),
        ssim=ssim(pred, target),
        f1=f1,
        f1_weighted=f1w,
        per_type_rmse=rmse_by_type(pred, target, track.cloud_type),
        location=loc,
        month=sample.timestamp.month,
    )


def write_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_records(path) -> list[EvalRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_json(json.loads(line)) for line in fh if line.strip()]


TABLE_METRICS = ("rmse_dbz", "percent_error", "psnr", "ssim", "f1", "f1_weighted")


def summarize(records) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation of each table metric (infinite PSNR values skipped)."""
    out = {}
    for name in TABLE_METRICS:
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        out[name] = (float(vals.mean()), float(vals.std())) if len(vals) else (float("nan"),) * 2
    return out


def type_summary(records) -> dict[int, tuple[float, float, int]]:
    """Per cloud type: mean, std and count of per-sample type RMSE."""
    acc: dict[int, list[float]] = {}
    for r in records:
        for code, v in r.per_type_rmse.items():
            acc.setdefault(code, []).append(v)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(acc.items())}


@dataclass
class GeoMap:
    cell_deg: float
    lat_edges: np.ndarray
    lon_edges: np.ndarray
    overall: np.ndarray  # [n_lat, n_lon] mean RMSE, NaN where empty
    monthly: np.ndarray  # [12, n_lat, n_lon]
    counts: np.ndarray  # [n_lat, n_lon]
    legend: dict = field(default_factory=dict)

    def save(self, out_dir, name: str = "rmse_map") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.overall.astype("<f4").tofile(out / f"{name}.f32")
        self.monthly.astype("<f4").tofile(out / f"{name}_monthly.f32")
        meta = {"cell_deg": self.cell_deg, "shape": list(self.overall.shape),
                "monthly_shape": list(self.monthly.shape),
                "lat_edges": self.lat_edges.tolist(), "lon_edges": self.lon_edges.tolist(),
                "counts": self.counts.tolist(), "empty": "NaN", **self.legend}
        (out / f"{name}.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def rmse_geo_aggregate(records, cell_deg: float = 5.0, extent: float = 45.0) -> GeoMap:
    """Mean RMSE per lat/lon cell, overall and per month. Empty cells are NaN."""
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    edges = np.arange(-extent, extent + cell_deg / 2, cell_deg)
    n = len(edges) - 1
    sums = np.zeros((13, n, n))
    counts = np.zeros((13, n, n))
    for r in records:
        i = min(max(int(np.searchsorted(edges, r.location[0], side="right")) - 1, 0), n - 1)
        j = min(max(int(np.searchsorted(edges, r.location[1], side="right")) - 1, 0), n - 1)
        for k in (0, r.month):
            sums[k, i, j] += r.rmse_dbz
            counts[k, i, j] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return GeoMap(cell_deg=cell_deg, lat_edges=edges, lon_edges=edges.copy(), overall=means[0],
                  monthly=means[1:], counts=counts[0].astype(int),
                  legend={"quantity": "mean RMSE (dBZ)", "rows": "latitude ascending",
                          "cols": "longitude ascending"})


def band_mean_rmse(records, max_abs_lat: float = 10.0) -> float:
    vals = [r.rmse_dbz for r in records if abs(r.location[0]) < max_abs_lat]
    return float(np.mean(vals)) if vals else float("nan")
