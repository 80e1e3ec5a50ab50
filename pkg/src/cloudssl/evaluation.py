"""Run a trained volume model over a split and collect per-sample metric records."""
from __future__ import annotations

import numpy as np
import torch

from .data import SplitData
from .head import gather_track, volume_forward
from .metrics import EvalRecord, evaluate_slice


def evaluate_model(model: torch.nn.Module, data: SplitData, batch_size: int = 8) -> list[EvalRecord]:
    model.eval()
    records = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            ids = data.ids[start:start + batch_size]
            vols = volume_forward(model, data, ids)
            for sid, vol in zip(ids, vols):
                sample = data.get(sid)
                pred = gather_track(vol, sample.track).double().cpu().numpy()
                records.append(evaluate_slice(pred, sample))
    return records


def max_intensity_projections(volume: np.ndarray) -> dict[str, np.ndarray]:
    """Static stand-ins for a 3D rendering: max over height, rows and columns."""
    return {"top": volume.max(axis=0), "side_rows": volume.max(axis=1), "side_cols": volume.max(axis=2)}
