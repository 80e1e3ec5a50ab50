"""Checkpoint format shared by pre-training and fine-tuning.

A checkpoint is a directory holding ``header.json`` plus one raw
little-endian float32 blob per named tensor (``<name>.f32``). Optimizer
moments are stored the same way under ``optim.<param>.<moment>.f32``.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

_F32 = np.dtype("<f4")


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer | None
    epoch: int = 0
    step: int = 0
    best_val_loss: float = float("inf")
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    best: dict | None = None


def _tensor_to_blob(t: torch.Tensor, path: Path) -> None:
    np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_F32).tofile(path)


def _blob_to_tensor(path: Path, shape, dtype) -> torch.Tensor:
    arr = np.fromfile(path, dtype=_F32).reshape(shape).astype(np.float32)
    return torch.from_numpy(arr).to(dtype)


def state_digest(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype=_F32).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, model: torch.nn.Module, header: dict,
                    optimizer: torch.optim.Optimizer | None = None) -> str:
    """Write a checkpoint directory; returns its id (digest of the weights)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    state = model.state_dict()
    tensors = {}
    for name, t in state.items():
        _tensor_to_blob(t, tmp / f"{name}.f32")
        tensors[name] = list(t.shape)
    optim_doc = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        optim_doc = {"param_groups": [], "state": {}}
        for g in optimizer.param_groups:
            optim_doc["param_groups"].append(
                {k: v for k, v in g.items() if k != "params"} | {"params": [names[id(p)] for p in g["params"]]})
            for p in g["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                entry = {"step": float(st["step"])}
                for moment in ("exp_avg", "exp_avg_sq"):
                    _tensor_to_blob(st[moment], tmp / f"optim.{n}.{moment}.f32")
                optim_doc["state"][n] = entry
    ckpt_id = state_digest(state)
    doc = dict(header)
    doc.update({"checkpoint_id": ckpt_id, "tensors": tensors, "optimizer": optim_doc})
    (tmp / "header.json").write_text(json.dumps(doc, indent=1, default=_json_default), encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return ckpt_id


def _json_default(o):
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_header(path) -> dict:
    return json.loads((Path(path) / "header.json").read_text(encoding="utf-8"))


def load_tensors(path, prefix: str = "") -> dict[str, torch.Tensor]:
    """Read every tensor whose name starts with ``prefix`` (prefix stripped)."""
    path = Path(path)
    header = read_header(path)
    out = {}
    for name, shape in header["tensors"].items():
        if name.startswith(prefix):
            out[name[len(prefix):]] = _blob_to_tensor(path / f"{name}.f32", shape, torch.float32)
    return out


def load_checkpoint(path, model: torch.nn.Module,
                    optimizer: torch.optim.Optimizer | None = None) -> dict:
    path = Path(path)
    header = read_header(path)
    model.load_state_dict(load_tensors(path))
    if optimizer is not None and header.get("optimizer"):
        params = dict(model.named_parameters())
        doc = header["optimizer"]
        for g, gdoc in zip(optimizer.param_groups, doc["param_groups"]):
            for k, v in gdoc.items():
                if k != "params":
                    g[k] = tuple(v) if isinstance(v, list) else v
        for n, entry in doc["state"].items():
            p = params[n]
            optimizer.state[p] = {
                "step": torch.tensor(entry["step"]),
                "exp_avg": _blob_to_tensor(path / f"optim.{n}.exp_avg.f32", p.shape,
                                           p.dtype).to(p.device),
                "exp_avg_sq": _blob_to_tensor(path / f"optim.{n}.exp_avg_sq.f32", p.shape,
                                              p.dtype).to(p.device),
            }
    return header


def resume_state(run_dir, model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> TrainState:
    """Rebuild the training state written by the epoch loop into ``run_dir``.

    Weights and optimizer moments come from ``run_dir/last``; the best
    weights so far from ``run_dir/best``.
    """
    run_dir = Path(run_dir)
    header = load_checkpoint(run_dir / "last", model, optimizer)
    state = TrainState(model=model, optimizer=optimizer, epoch=header["epoch"], step=header["step"],
                       best_val_loss=header["best_val_loss"], seed=header["seed"],
                       history=list(header["history"]))
    if (run_dir / "best").exists():
        state.best = {k: v.to(next(model.parameters()).device) for k, v in
                      load_tensors(run_dir / "best").items()}
    return state
