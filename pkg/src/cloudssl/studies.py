"""Desk-scale training studies: overfit sanity runs and the directional comparison protocol.

The directional protocol trains every transformer variant and fine-tuning
regime on one fixed synthetic dataset, several seeds each, and reports the
quantities compared across models: best validation track MSE, mean RMSE
over the equatorial band and per-type RMSE on the held-out test split.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ViTConfig, vit_config
from .data import SplitData
from .evaluation import evaluate_model
from .head import FinetuneRegime, apply_regime, batch_track_loss, build_head, finetune, load_encoder, volume_forward
from .mae import build_mae, finish, mae_batch_loss, pretrain
from .metrics import band_mean_rmse, summarize, type_summary
from .synth import GeneratorConfig, build_dataset
from .tokenizer import sample_mask
from .training import Hyper, make_optimizer, restore_best

log = logging.getLogger(__name__)


# ------------------------------------------------------------ overfit runs

def overfit_pretrain(cfg: ViTConfig, data: SplitData, steps: int = 200, lr: float = 1e-3,
                     mask_ratio: float = 0.75, seed: int = 0) -> list[float]:
    """Full-batch masked-MSE descent on ``data`` with one fixed mask per sample.

    Returns the loss before every step and after the last one (``steps + 1`` values).
    """
    torch.manual_seed(seed)
    model = build_mae(cfg)
    rng = np.random.default_rng(seed)
    plans = [sample_mask(cfg.n_tokens, mask_ratio, rng) for _ in range(len(data))]
    vis = torch.from_numpy(np.stack([p.visible_idx for p in plans])).long()
    msk = torch.from_numpy(np.stack([p.masked_idx for p in plans])).long()
    opt = make_optimizer(model, lr)
    losses = []
    model.train()
    for _ in range(steps):
        loss = mae_batch_loss(model, data, data.ids, vis, msk)
        losses.append(loss.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        losses.append(mae_batch_loss(model, data, data.ids, vis, msk).item())
    return losses


def overfit_finetune(cfg: ViTConfig, data: SplitData, steps: int = 300, lr: float = 1e-3,
                     seed: int = 0) -> list[float]:
    """Full-batch track-MSE descent of a freshly initialised head on ``data``."""
    torch.manual_seed(seed)
    model = build_head(cfg)
    apply_regime(model, FinetuneRegime.FROM_SCRATCH)
    opt = make_optimizer(model, lr)
    tracks = data.tracks(data.ids)
    losses = []
    model.train()
    for _ in range(steps):
        loss = batch_track_loss(volume_forward(model, data, data.ids), tracks)
        losses.append(loss.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        losses.append(batch_track_loss(volume_forward(model, data, data.ids), tracks).item())
    return losses


# ---------------------------------------------------- directional protocol

# Transformer variants of the protocol: name -> (use_time, use_coords).
ENCODINGS = {"mae": (False, False), "satmae+time": (True, False),
             "satmae+coords": (False, True), "satmae+time+coords": (True, True)}


@dataclass(frozen=True)
class DirectionalProtocol:
    generator: dict = field(default_factory=lambda: dict(seed=7, n_scenes=2048, n_pretrain_scenes=512,
                                                         image_size=64))
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_train: int = 64
    head_width: int = 64
    pretrain: dict = field(default_factory=lambda: dict(lr=2e-3, batch_size=8, epochs=20, fraction=1.0))
    finetune: dict = field(default_factory=lambda: dict(lr=5e-4, batch_size=4, epochs=40, fraction=1.0))

    def model_config(self, variant: str) -> ViTConfig:
        t, c = ENCODINGS[variant]
        return vit_config("desk", 8, image_size=self.generator["image_size"], use_time=t, use_coords=c,
                          head_channels=(self.head_width,) * 3)

    def to_json(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:12]


def prepare_data(protocol: DirectionalProtocol, root) -> Path:
    """Generate the protocol dataset under ``root`` unless an identical one is already there.

    ``root`` belongs to the protocol: anything else in it, including a
    partial dataset left by an interrupted run, is overwritten.
    """
    root = Path(root)
    gen = GeneratorConfig(**protocol.generator)
    marker = root / "generator.json"
    if marker.exists() and json.loads(marker.read_text(encoding="utf-8")) == gen.to_json():
        return root
    build_dataset(gen, root, overwrite=root.exists())
    return root


def _score(model, test: SplitData, best_val: float) -> dict:
    recs = evaluate_model(model, test)
    return {"val": best_val, "equatorial_rmse": band_mean_rmse(recs),
            "rmse": summarize(recs)["rmse_dbz"][0],
            "types": {str(k): v[0] for k, v in type_summary(recs).items()}}


def run_seed(protocol: DirectionalProtocol, root, seed: int) -> dict:
    """Train and score every (variant, regime) pair of the protocol for one seed."""
    root = Path(root)
    pt_train, pt_val = SplitData.load(root, "pretrain_train"), SplitData.load(root, "pretrain_val")
    ft_train = SplitData.load(root, "finetune_train")
    ft_train = ft_train.subset(ft_train.ids[:protocol.n_train])
    ft_val, test = SplitData.load(root, "finetune_val"), SplitData.load(root, "finetune_test")
    results = {}
    for variant in ENCODINGS:
        cfg = protocol.model_config(variant)
        torch.manual_seed(seed)
        mae = build_mae(cfg)
        finish(pretrain(mae, pt_train, pt_val, Hyper(seed=seed, **protocol.pretrain)))
        regimes = list(FinetuneRegime) if variant == "mae" else [FinetuneRegime.UNFROZEN]
        for regime in regimes:
            torch.manual_seed(seed)
            model = build_head(cfg)
            if regime is not FinetuneRegime.FROM_SCRATCH:
                load_encoder(model, mae)
            state = finetune(model, regime, ft_train, ft_val, Hyper(seed=seed, **protocol.finetune))
            restore_best(state)
            results[f"{variant}:{regime.value}"] = _score(model, test, state.best_val_loss)
            log.info("seed %d %s:%s %s", seed, variant, regime.value, results[f"{variant}:{regime.value}"])
    return results


def run_directional(protocol: DirectionalProtocol, root, cache_dir=None, salt: str = "") -> dict[int, dict]:
    """Per-seed results, reusing ``cache_dir/<digest>-seed<k>.json`` when present.

    ``salt`` is folded into the cache key (for example a digest of the
    package sources) so stale results are never reused.
    """
    root = prepare_data(protocol, root)
    out = {}
    key = hashlib.sha256((protocol.digest() + salt).encode()).hexdigest()[:12]
    for seed in protocol.seeds:
        path = Path(cache_dir) / f"{key}-seed{seed}.json" if cache_dir is not None else None
        if path is not None and path.exists():
            out[seed] = json.loads(path.read_text(encoding="utf-8"))
            continue
        out[seed] = run_seed(protocol, root, seed)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(out[seed], indent=1, sort_keys=True), encoding="utf-8")
    return out


def pooled_type_rmse(results: dict[int, dict]) -> dict[int, float]:
    """Per-type RMSE averaged over every trained model of every seed."""
    acc: dict[int, list[float]] = {}
    for res in results.values():
        for run in res.values():
            for k, v in run["types"].items():
                acc.setdefault(int(k), []).append(v)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def directional_verdicts(results: dict[int, dict]) -> dict[str, dict]:
    """Evaluate the directional comparisons; each entry has ``passed`` and its evidence."""
    seeds = sorted(results)
    val = {s: {k: r["val"] for k, r in results[s].items()} for s in seeds}
    eq = {s: {k: r["equatorial_rmse"] for k, r in results[s].items()} for s in seeds}
    un, sc, fr = "mae:unfrozen_backbone", "mae:from_scratch", "mae:frozen_backbone"
    n = len(seeds)

    wins = sum(val[s][un] < val[s][sc] for s in seeds)
    med = {k: float(np.median([val[s][k] for s in seeds])) for k in (un, sc, fr)}
    between = min(med[un], med[sc]) <= med[fr] <= max(med[un], med[sc])
    pretraining = {"passed": wins >= n - 1 and between, "unfrozen_beats_scratch": wins,
                   "median_val": med, "n_seeds": n}

    full, plain = "satmae+time+coords:unfrozen_backbone", un
    c, t = "satmae+coords:unfrozen_backbone", "satmae+time:unfrozen_backbone"
    enc_wins = sum(eq[s][full] < eq[s][plain] for s in seeds)
    ct_wins = sum(eq[s][c] < eq[s][t] for s in seeds)
    encodings = {"passed": enc_wins >= n - 1 and ct_wins >= (n + 1) // 2,
                 "full_beats_plain": enc_wins, "coords_beats_time": ct_wins,
                 "equatorial_rmse": {s: eq[s] for s in seeds}}

    pooled = pooled_type_rmse(results)
    dc, ci, ns, st = (pooled.get(k, float("nan")) for k in (8, 1, 7, 4))
    types = {"passed": bool(dc > ci and ns > st), "pooled_type_rmse": pooled}
    return {"pretraining": pretraining, "encodings": encodings, "cloud_types": types}
