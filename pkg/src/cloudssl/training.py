"""Epoch loop shared by pre-training, fine-tuning and the U-Net baseline."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch

from .checkpoint import TrainState, save_checkpoint
from .data import SplitData, batches
from .sample_store import epoch_subsample

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Hyper:
    lr: float = 1.5e-4
    batch_size: int = 8
    epochs: int = 50
    fraction: float = 0.10
    seed: int = 0
    max_steps: int | None = None
    cosine: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr)


def fit(state: TrainState, train: SplitData, hyper: Hyper,
        step_loss: Callable[[list[str], int, int], torch.Tensor],
        validate: Callable[[], dict],
        out_dir=None, header: dict | None = None) -> TrainState:
    """Run epochs ``state.epoch .. hyper.epochs - 1``.

    ``step_loss(ids, epoch, batch_index)`` returns the scalar loss of one
    batch; ``validate()`` returns a dict with at least ``"loss"``. The model
    with the lowest validation loss is kept in ``state.best`` and, when
    ``out_dir`` is given, written to ``out_dir/best``; ``out_dir/last``
    always holds a resumable copy.
    """
    model, opt = state.model, state.optimizer
    total_steps = hyper.epochs * math.ceil(math.ceil(hyper.fraction * len(train)) / hyper.batch_size)
    sched = None
    if hyper.cosine:
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / total_steps)))
        for _ in range(state.step):
            sched.step()
    while state.epoch < hyper.epochs:
        if hyper.max_steps is not None and state.step >= hyper.max_steps:
            break
        epoch = state.epoch
        ids = epoch_subsample(train.manifest, hyper.fraction, epoch, hyper.seed)
        model.train()
        losses = []
        for b, batch_ids in enumerate(batches(ids, hyper.batch_size)):
            if hyper.max_steps is not None and state.step >= hyper.max_steps:
                break
            loss = step_loss(batch_ids, epoch, b)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            state.step += 1
            losses.append(loss.item())
        model.eval()
        with torch.no_grad():
            metrics = validate()
        if not math.isfinite(metrics["loss"]):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch, "step": state.step,
                  "train_loss": sum(losses) / max(len(losses), 1)}
        record.update({f"val_{k}": v for k, v in metrics.items()})
        state.history.append(record)
        state.epoch += 1
        log.info("epoch %d: %s", epoch, record)
        if metrics["loss"] < state.best_val_loss:
            state.best_val_loss = metrics["loss"]
            state.best = copy.deepcopy(model.state_dict())
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "best", model, _header(state, header))
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "last", model, _header(state, header), opt)
    return state


def _header(state: TrainState, extra: dict | None) -> dict:
    doc = dict(extra or {})
    doc.update({"epoch": state.epoch, "step": state.step, "best_val_loss": state.best_val_loss,
                "seed": state.seed, "history": state.history})
    return doc


def restore_best(state: TrainState) -> None:
    if state.best is not None:
        state.model.load_state_dict(state.best)
