"""Figure data written as arrays (.npz) plus JSON, with optional PNG rendering.

Nothing here is needed to train or evaluate; plotting stays replaceable
because every figure can be redrawn from the emitted data alone.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import SplitData
from .evaluation import max_intensity_projections
from .head import gather_track, predict_volume
from .mae import MaskedAutoencoder, reconstruct
from .metrics import rmse_geo_aggregate
from .synth import CLOUD_TYPES
from .tokenizer import sample_mask


def loss_curves(run_dirs) -> dict[str, dict[str, list]]:
    """Per run: epoch, train loss and validation loss read from ``log.jsonl``."""
    out = {}
    for run in map(Path, run_dirs):
        rows = [json.loads(line) for line in (run / "log.jsonl").read_text(encoding="utf-8").splitlines()
                if line.strip()]
        out[run.name] = {"epoch": [r["epoch"] for r in rows],
                         "train_loss": [r["train_loss"] for r in rows],
                         "val_loss": [r["val_loss"] for r in rows]}
    return out


def triptychs(model: MaskedAutoencoder, data: SplitData, n: int, seed: int = 0,
              mask_ratio: float = 0.75) -> list[dict]:
    """Masked input, reconstruction and original for the first ``n`` samples."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for sid in data.ids[:n]:
        plan = sample_mask(model.cfg.n_tokens, mask_ratio, rng)
        out.append({"sample_id": sid, **reconstruct(model, data.get(sid), plan)})
    return out


def boxplot_data(records_by_model: dict[str, list]) -> dict:
    """Per model and cloud type: the per-sample RMSE values and their five-number summary."""
    out = {}
    for name, records in records_by_model.items():
        per_type: dict[int, list[float]] = {}
        for r in records:
            for code, v in r.per_type_rmse.items():
                per_type.setdefault(code, []).append(v)
        out[name] = {}
        for code, vals in sorted(per_type.items()):
            v = np.asarray(vals)
            q1, med, q3 = np.percentile(v, [25, 50, 75])
            iqr = q3 - q1
            inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
            out[name][CLOUD_TYPES[code]] = {
                "values": v.tolist(), "q1": q1, "median": med, "q3": q3,
                "whisker_low": float(inside.min()), "whisker_high": float(inside.max())}
    return out


def volume_views(model, data: SplitData, n: int) -> list[dict]:
    """Max-intensity projections of predicted volumes with predicted and observed track slices."""
    out = []
    for sid in data.ids[:n]:
        sample = data.get(sid)
        vol = predict_volume(model, sample)
        view = {"sample_id": sid, **max_intensity_projections(vol)}
        if sample.track is not None:
            view["track_pred"] = gather_track(vol, sample.track)
            view["track_true"] = sample.track.reflectivity
            view["pixel_path"] = sample.track.pixel_path
        out.append(view)
    return out


def _save_arrays(out: Path, name: str, items: list[dict]) -> list[str]:
    files = []
    for i, item in enumerate(items):
        arrays = {k: np.asarray(v) for k, v in item.items() if k != "sample_id"}
        path = out / f"{name}_{i:02d}.npz"
        np.savez(path, **arrays)
        files.append(path.name)
    return files


def emit(out, runs=(), mae=None, volume_model=None, data: SplitData | None = None,
         records: dict[str, list] | None = None, n_examples: int = 3, cell_deg: float = 5.0,
         seed: int = 0, png: bool = False) -> dict:
    """Write every figure whose inputs were supplied; returns the JSON index."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    index: dict = {}
    if runs:
        index["loss_curves"] = "loss_curves.json"
        (out / "loss_curves.json").write_text(json.dumps(loss_curves(runs), indent=1), encoding="utf-8")
    if mae is not None and data is not None:
        trips = triptychs(mae, data, n_examples, seed)
        index["triptychs"] = {"files": _save_arrays(out, "triptych", trips),
                              "samples": [t["sample_id"] for t in trips],
                              "arrays": ["masked", "reconstruction", "original"]}
    if volume_model is not None and data is not None:
        views = volume_views(volume_model, data, n_examples)
        index["volume_views"] = {"files": _save_arrays(out, "volume", views),
                                 "samples": [v["sample_id"] for v in views]}
    if records:
        for name, recs in records.items():
            geo = rmse_geo_aggregate(recs, cell_deg=cell_deg)
            geo.save(out, f"rmse_map_{name}")
        index["rmse_maps"] = [f"rmse_map_{name}.json" for name in records]
        (out / "boxplot.json").write_text(json.dumps(boxplot_data(records), indent=1), encoding="utf-8")
        index["boxplot"] = "boxplot.json"
    (out / "index.json").write_text(json.dumps(index, indent=1), encoding="utf-8")
    if png:
        render_png(out, index)
    return index


def render_png(out, index: dict) -> list[str]:
    """Rasterize the emitted data with matplotlib (optional dependency)."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise RuntimeError("PNG output needs matplotlib; install the 'figures' extra") from e
    out = Path(out)
    written = []

    def save(fig, name):
        fig.savefig(out / name, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(name)

    if "loss_curves" in index:
        curves = json.loads((out / index["loss_curves"]).read_text(encoding="utf-8"))
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, c in curves.items():
            ax.plot(c["epoch"], c["val_loss"], label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation loss")
        ax.legend(fontsize=7)
        save(fig, "loss_curves.png")
    for i, f in enumerate(index.get("triptychs", {}).get("files", [])):
        arr = np.load(out / f)
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        for ax, key in zip(axes, ("masked", "reconstruction", "original")):
            ax.imshow(arr[key][0], vmin=0, vmax=1, cmap="gray")
            ax.set_title(key)
            ax.axis("off")
        save(fig, f"triptych_{i:02d}.png")
    for i, f in enumerate(index.get("volume_views", {}).get("files", [])):
        arr = np.load(out / f)
        panels = [k for k in ("top", "side_rows", "track_pred", "track_true") if k in arr]
        fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
        for ax, key in zip(np.atleast_1d(axes), panels):
            ax.imshow(arr[key], vmin=0, vmax=1, origin="upper" if key == "top" else "lower",
                      aspect="auto")
            ax.set_title(key)
        save(fig, f"volume_{i:02d}.png")
    for name in index.get("rmse_maps", []):
        meta = json.loads((out / name).read_text(encoding="utf-8"))
        grid = np.fromfile(out / name.replace(".json", ".f32"), dtype="<f4").reshape(meta["shape"])
        e = meta["lat_edges"]
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(grid, origin="lower", extent=[e[0], e[-1], e[0], e[-1]])
        fig.colorbar(im, ax=ax, label=meta["quantity"])
        save(fig, name.replace(".json", ".png"))
    if "boxplot" in index:
        doc = json.loads((out / index["boxplot"]).read_text(encoding="utf-8"))
        for model, per_type in doc.items():
            fig, ax = plt.subplots(figsize=(8, 3))
            ax.boxplot([v["values"] for v in per_type.values()], showfliers=False)
            ax.set_xticks(range(1, len(per_type) + 1), list(per_type), rotation=30, fontsize=7)
            ax.set_ylabel("RMSE (dBZ)")
            save(fig, f"boxplot_{model}.png")
    return written
