"""Run configuration, stage execution and provenance for the command line.

A run is described by one JSON document validated against ``CONFIG_SCHEMA``.
Every stage writes a frozen copy of the resolved document to
``<out>/config.json`` and a ``provenance.json`` that links it to its inputs:
data (generator seed and manifest digest) -> pre-training checkpoint ->
fine-tuning checkpoint -> evaluation records. The chain is re-checked
before a checkpoint is fine-tuned or evaluated.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .checkpoint import load_checkpoint, read_header, resume_state, state_digest
from .config import UNetConfig, ViTConfig, vit_config
from .data import SplitData
from .evaluation import evaluate_model
from .head import (CloudRegressor, FinetuneRegime, apply_regime, build_head, finetune,
                   load_encoder)
from . import figures
from .mae import MaskedAutoencoder, build_mae, pretrain
from .metrics import TABLE_METRICS, read_records, summarize, type_summary, write_records
from .sample_store import SPLITS
from .spatial_test import PairedScores, spatial_superiority_test
from .synth import GeneratorConfig, build_dataset
from .training import Hyper, make_optimizer
from .unet import build_unet, unet_train

log = logging.getLogger(__name__)

DEVICE_ENV = "CLOUDSSL_DEVICE"

# Variant name -> (use_time, use_coords); None marks the convolutional baseline.
VARIANTS = {
    "mae": (False, False),
    "satmae": (False, False),
    "satmae+time": (True, False),
    "satmae+coords": (False, True),
    "satmae+time+coords": (True, True),
    "unet": None,
}

_HYPER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 1, "maximum": 50},
        "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "max_steps": {"type": ["integer", "null"], "minimum": 1},
        "cosine": {"type": "boolean"},
        "mask_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "regime": {"enum": [r.value for r in FinetuneRegime]},
        "n_train": {"type": ["integer", "null"], "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "variant": {"enum": list(VARIANTS)},
        "seed": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "root": {"type": "string"},
                "eval_split": {"enum": list(SPLITS)},
                "generator": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "seed": {"type": "integer", "minimum": 0},
                        "n_scenes": {"type": "integer", "minimum": 1},
                        "n_pretrain_scenes": {"type": ["integer", "null"], "minimum": 0},
                        "image_size": {"type": "integer", "minimum": 16},
                        "pixel_deg": {"type": "number", "exclusiveMinimum": 0},
                        "noise_sigma": {"type": "number", "minimum": 0},
                        "latitude_band_bias": {"type": "number", "minimum": 0},
                        "class_priors": {"type": "array", "items": {"type": "number", "minimum": 0},
                                         "minItems": 8, "maxItems": 8},
                        "mean_structures": {"type": "number", "minimum": 0},
                        "convective_lat_scale": {"type": "number", "exclusiveMinimum": 0},
                        "diurnal_amplitude_dbz": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scale": {"enum": ["small", "base", "desk"]},
                "token_size": {"enum": [8, 16]},
                "embed_dim": {"type": "integer", "minimum": 4},
                "depth": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                "decoder_dim": {"type": "integer", "minimum": 4},
                "decoder_depth": {"type": "integer", "minimum": 1},
                "decoder_heads": {"type": "integer", "minimum": 1},
                "head_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "learned_pos": {"type": "boolean"},
            },
        },
        "unet": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "depth": {"type": "integer", "minimum": 1},
                "base_channels": {"type": "integer", "minimum": 1},
                "blocks_per_level": {"type": "integer", "minimum": 1},
            },
        },
        "pretrain": _HYPER,
        "finetune": _HYPER,
        "evaluate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"batch_size": {"type": "integer", "minimum": 1}},
        },
        "stats": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "n_boot": {"type": "integer", "minimum": 1},
                "metric": {"enum": ["rmse_dbz", "percent_error"]},
            },
        },
        "figures": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_examples": {"type": "integer", "minimum": 1},
                "png": {"type": "boolean"},
                "cell_deg": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "variant": "mae",
    "seed": 0,
    "data": {"root": "data", "eval_split": "finetune_test", "generator": {}},
    "model": {"scale": "small", "token_size": 8},
    "unet": {},
    "pretrain": {"lr": 1.5e-4, "batch_size": 8, "epochs": 50, "fraction": 0.10,
                 "max_steps": None, "cosine": False, "mask_ratio": 0.75},
    "finetune": {"lr": 1.5e-4, "batch_size": 4, "epochs": 50, "fraction": 0.50,
                 "max_steps": None, "cosine": False, "regime": "unfrozen_backbone",
                 "n_train": None},
    "evaluate": {"batch_size": 8},
    "stats": {"k": 1000, "n_boot": 2000, "metric": "rmse_dbz"},
    "figures": {"n_examples": 3, "png": False, "cell_deg": 5.0},
}


class ConfigError(ValueError):
    pass


class ProvenanceError(RuntimeError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(doc: dict | None = None, seed: int | None = None) -> dict:
    """Validate a (partial) config document and fill in every default."""
    doc = doc or {}
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {e.message}") from None
    cfg = _merge(DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = int(seed)
    gen = GeneratorConfig(**cfg["data"]["generator"])
    cfg["data"]["generator"] = gen.to_json()
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    return cfg


def load_config(path=None, seed: int | None = None) -> dict:
    doc = {} if path is None else json.loads(Path(path).read_text(encoding="utf-8"))
    return resolve_config(doc, seed)


def variant_matrix(template: dict) -> dict[str, dict]:
    """Expand a config into the SatMAE encoding grid plus plain MAE and the U-Net."""
    base = resolve_config({k: v for k, v in template.items() if k != "variant"})
    return {name: _merge(base, {"variant": name}) for name in VARIANTS}


def vit_from_config(cfg: dict) -> ViTConfig:
    flags = VARIANTS[cfg["variant"]]
    if flags is None:
        raise ConfigError("the unet variant has no transformer configuration")
    m = dict(cfg["model"])
    scale, p = m.pop("scale"), m.pop("token_size")
    if "head_channels" in m:
        m["head_channels"] = tuple(m["head_channels"])
    m.setdefault("image_size", cfg["data"]["generator"]["image_size"])
    return vit_config(scale, p, use_time=flags[0], use_coords=flags[1], **m)


def unet_from_config(cfg: dict) -> UNetConfig:
    return UNetConfig(image_size=cfg["data"]["generator"]["image_size"], **cfg["unet"])


def hyper_from(section: dict, seed: int) -> Hyper:
    return Hyper(lr=section["lr"], batch_size=section["batch_size"], epochs=section["epochs"],
                 fraction=section["fraction"], seed=seed, max_steps=section["max_steps"],
                 cosine=section["cosine"])


def device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu")
    dev = torch.device(name)
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise RuntimeError(f"{DEVICE_ENV}={name} but CUDA is not available")
    return dev


# ---------------------------------------------------------------- provenance

def data_digest(root) -> str:
    """Digest of the generator settings and every split manifest of a dataset."""
    root = Path(root)
    h = hashlib.sha256()
    for path in [root / "generator.json", *sorted((root / "manifests").glob("*.json"))]:
        if not path.exists():
            raise ProvenanceError(f"dataset file missing: {path}")
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def data_provenance(root) -> dict:
    root = Path(root)
    gen = json.loads((root / "generator.json").read_text(encoding="utf-8"))
    return {"root": str(root.resolve()), "generator_seed": gen["seed"], "digest": data_digest(root)}


def validate_chain(header: dict, data_root) -> dict:
    """Check a checkpoint's recorded lineage against the data and parent checkpoints on disk."""
    prov = header.get("provenance")
    if not prov:
        raise ProvenanceError("checkpoint carries no provenance record")
    current = data_digest(data_root)
    if prov["data"]["digest"] != current:
        raise ProvenanceError(f"checkpoint was trained on data {prov['data']['digest']}, "
                              f"but {data_root} has digest {current}")
    parent = prov.get("parent")
    if parent is not None:
        if parent["data"]["digest"] != prov["data"]["digest"]:
            raise ProvenanceError("pre-training and fine-tuning used different datasets")
        ppath = Path(parent["path"])
        if ppath.exists() and read_header(ppath)["checkpoint_id"] != parent["checkpoint_id"]:
            raise ProvenanceError(f"parent checkpoint {ppath} changed since it was used")
    return prov


# -------------------------------------------------------------- run folders

def _prepare_run(out, cfg: dict, stage: str) -> Path:
    """Create (or re-enter, for an identical config) a run directory."""
    out = Path(out)
    frozen = out / "config.json"
    if frozen.exists():
        prev = json.loads(frozen.read_text(encoding="utf-8"))
        if prev.get("stage") != stage or prev.get("config") != cfg:
            raise FileExistsError(f"{out} belongs to a different run")
    out.mkdir(parents=True, exist_ok=True)
    frozen.write_text(json.dumps({"stage": stage, "config": cfg}, indent=1, sort_keys=True),
                      encoding="utf-8")
    return out


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_plain), encoding="utf-8")


def _plain(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _write_log(path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _finetune_train(cfg: dict, root) -> SplitData:
    train = SplitData.load(root, "finetune_train")
    n = cfg["finetune"]["n_train"]
    return train.subset(train.ids[:n]) if n else train


# ------------------------------------------------------------------ stages

def gen_data(cfg: dict, out) -> dict:
    out = Path(out)
    gen = GeneratorConfig(**cfg["data"]["generator"])
    manifests = build_dataset(gen, out)
    _write_json(out / "config.json", {"stage": "gen-data", "config": cfg})
    counts = {k: len(m) for k, m in manifests.items()}
    _write_json(out / "provenance.json", {"stage": "gen-data", "data": data_provenance(out),
                                          "counts": counts})
    return counts


def run_pretrain(cfg: dict, out) -> dict:
    if VARIANTS[cfg["variant"]] is None:
        raise ConfigError("the unet variant has no pre-training stage")
    out = _prepare_run(out, cfg, "pretrain")
    root = cfg["data"]["root"]
    train, val = SplitData.load(root, "pretrain_train"), SplitData.load(root, "pretrain_val")
    vcfg = vit_from_config(cfg)
    torch.manual_seed(cfg["seed"])
    model = build_mae(vcfg).to(device())
    hyper = hyper_from(cfg["pretrain"], cfg["seed"])
    ckpt = out / "checkpoints"
    state = None
    if (ckpt / "last").exists():
        state = resume_state(ckpt, model, make_optimizer(model, hyper.lr))
    prov = {"stage": "pretrain", "variant": cfg["variant"], "seed": cfg["seed"],
            "data": data_provenance(root), "parent": None}
    state = pretrain(model, train, val, hyper, mask_ratio=cfg["pretrain"]["mask_ratio"], state=state,
                     out_dir=ckpt, header={"provenance": prov, "variant": cfg["variant"]})
    _write_log(out / "log.jsonl", state.history)
    best = read_header(ckpt / "best")
    summary = {**prov, "checkpoint": str((ckpt / "best").resolve()),
               "checkpoint_id": best["checkpoint_id"], "best_val_loss": state.best_val_loss}
    _write_json(out / "provenance.json", summary)
    return summary


def run_finetune(cfg: dict, out, ckpt=None) -> dict:
    """Fine-tune a transformer (from ``ckpt`` unless training from scratch) or train the U-Net."""
    out = _prepare_run(out, cfg, "finetune")
    root = cfg["data"]["root"]
    train, val = _finetune_train(cfg, root), SplitData.load(root, "finetune_val")
    hyper = hyper_from(cfg["finetune"], cfg["seed"])
    regime = FinetuneRegime(cfg["finetune"]["regime"])
    data_prov = data_provenance(root)
    parent = None
    torch.manual_seed(cfg["seed"])
    if VARIANTS[cfg["variant"]] is None:
        model, regime = build_unet(unet_from_config(cfg)), FinetuneRegime.FROM_SCRATCH
        if ckpt is not None:
            raise ConfigError("the unet baseline is trained from scratch; drop --ckpt")
    else:
        vcfg = vit_from_config(cfg)
        model = build_head(vcfg)
        if regime is not FinetuneRegime.FROM_SCRATCH:
            if ckpt is None:
                raise ConfigError(f"regime {regime.value} needs a pre-training checkpoint (--ckpt)")
            header = read_header(ckpt)
            pprov = validate_chain(header, root)
            if pprov["stage"] != "pretrain":
                raise ProvenanceError(f"{ckpt} is not a pre-training checkpoint")
            if ViTConfig.from_json(header["config"]).encoding != vcfg.encoding:
                raise ProvenanceError("checkpoint encodings do not match the configured variant")
            load_encoder(model, ckpt)
            parent = {"stage": "pretrain", "path": str(Path(ckpt).resolve()),
                      "checkpoint_id": header["checkpoint_id"], "data": pprov["data"],
                      "variant": pprov["variant"]}
    model = model.to(device())
    ck = out / "checkpoints"
    state = None
    if (ck / "last").exists():
        apply_regime(model, regime)
        state = resume_state(ck, model, make_optimizer(model, hyper.lr))
    prov = {"stage": "finetune", "variant": cfg["variant"], "seed": cfg["seed"],
            "regime": regime.value, "data": data_prov, "parent": parent}
    hdr = {"provenance": prov, "variant": cfg["variant"]}
    if isinstance(model, CloudRegressor):
        state = finetune(model, regime, train, val, hyper, state=state, out_dir=ck, header=hdr)
    else:
        hdr["config"] = model.cfg.to_json()
        state = unet_train(model, train, val, hyper, state=state, out_dir=ck, header=hdr)
    _write_log(out / "log.jsonl", state.history)
    best = read_header(ck / "best")
    summary = {**prov, "checkpoint": str((ck / "best").resolve()),
               "checkpoint_id": best["checkpoint_id"], "best_val_loss": state.best_val_loss}
    _write_json(out / "provenance.json", summary)
    return summary


def load_volume_model(ckpt) -> tuple[torch.nn.Module, dict]:
    """Rebuild a fine-tuned transformer or U-Net from its checkpoint directory."""
    header = read_header(ckpt)
    if header.get("kind") == "ResUNet":
        model = build_unet(UNetConfig.from_json(header["config"]))
    elif header.get("kind") == "CloudRegressor":
        model = build_head(ViTConfig.from_json(header["config"]))
    else:
        raise ProvenanceError(f"{ckpt} is not a fine-tuned volume model (kind={header.get('kind')})")
    load_checkpoint(ckpt, model)
    return model.to(device()).eval(), header


def run_evaluate(cfg: dict, out, ckpt) -> dict:
    if ckpt is None:
        raise ConfigError("evaluate needs a fine-tuned checkpoint (--ckpt)")
    out = _prepare_run(out, cfg, "evaluate")
    root = cfg["data"]["root"]
    header = read_header(ckpt)
    prov = validate_chain(header, root)
    if prov["stage"] != "finetune":
        raise ProvenanceError(f"{ckpt} is not a fine-tuning checkpoint")
    model, header = load_volume_model(ckpt)
    if state_digest(model.state_dict()) != header["checkpoint_id"]:
        raise ProvenanceError(f"weights in {ckpt} do not match the recorded checkpoint id")
    split = cfg["data"]["eval_split"]
    data = SplitData.load(root, split)
    records = evaluate_model(model, data, cfg["evaluate"]["batch_size"])
    write_records(records, out / "records.jsonl")
    summary = {"summary": summarize(records), "per_type": type_summary(records), "split": split,
               "n": len(records)}
    _write_json(out / "summary.json", summary)
    _write_json(out / "provenance.json",
                {"stage": "evaluate", "split": split, "data": prov["data"],
                 "parent": {"stage": "finetune", "path": str(Path(ckpt).resolve()),
                            "checkpoint_id": header["checkpoint_id"], "variant": prov["variant"],
                            "parent": prov.get("parent")}})
    return summary


def run_compare(records: dict[str, str], out=None) -> dict:
    """Six-metric table (mean, std per model) from named evaluation record files."""
    if not records:
        raise ConfigError("compare needs at least one NAME=RECORDS input")
    table = {name: summarize(read_records(path)) for name, path in records.items()}
    doc = {"metrics": list(TABLE_METRICS), "models": list(records), "table": table}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "table.json", doc)
        (out / "table.md").write_text(format_table(doc), encoding="utf-8")
    return doc


METRIC_LABELS = {"rmse_dbz": "RMSE (dBZ)", "percent_error": "% error", "psnr": "PSNR",
                 "ssim": "SSIM", "f1": "F1", "f1_weighted": "F1 (weighted)"}


def format_table(doc: dict) -> str:
    models = doc["models"]
    lines = ["| metric | " + " | ".join(models) + " |", "|---" * (len(models) + 1) + "|"]
    for m in doc["metrics"]:
        cells = [f"{doc['table'][k][m][0]:.4g} ± {doc['table'][k][m][1]:.2g}" for k in models]
        lines.append(f"| {METRIC_LABELS[m]} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def run_stats_test(cfg: dict, first, second, out=None) -> dict:
    """Spatial superiority test of model 1 over model 2 on paired per-sample scores."""
    a = {r.sample_id: r for r in read_records(first)}
    b = {r.sample_id: r for r in read_records(second)}
    ids = sorted(set(a) & set(b))
    if len(ids) < 2:
        raise ConfigError("the two record files share fewer than two samples")
    metric = cfg["stats"]["metric"]
    scores = PairedScores(locations=np.array([a[i].location for i in ids]),
                          z1=np.array([getattr(a[i], metric) for i in ids]),
                          z2=np.array([getattr(b[i], metric) for i in ids]))
    report = spatial_superiority_test(scores, k=cfg["stats"]["k"], n_boot=cfg["stats"]["n_boot"],
                                      seed=cfg["seed"])
    report.update({"metric": metric, "model_1": str(first), "model_2": str(second)})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "stats_test.json", report)
    return report


def load_mae(ckpt) -> MaskedAutoencoder:
    header = read_header(ckpt)
    if header.get("kind") != "mae":
        raise ProvenanceError(f"{ckpt} is not a pre-training checkpoint")
    model = build_mae(ViTConfig.from_json(header["config"]))
    load_checkpoint(ckpt, model)
    return model.to(device()).eval()


def run_figures(cfg: dict, out, ckpts=(), runs=(), records: dict[str, str] | None = None) -> dict:
    """Emit figure data for whichever checkpoints, run directories and record files are given."""
    fig = cfg["figures"]
    mae = volume_model = None
    for ck in ckpts:
        kind = read_header(ck).get("kind")
        if kind == "mae":
            mae = load_mae(ck)
        else:
            volume_model, _ = load_volume_model(ck)
    data = None
    if mae is not None or volume_model is not None:
        data = SplitData.load(cfg["data"]["root"], cfg["data"]["eval_split"])
    recs = {name: read_records(path) for name, path in (records or {}).items()}
    return figures.emit(out, runs=runs, mae=mae, volume_model=volume_model, data=data, records=recs,
                        n_examples=fig["n_examples"], cell_deg=fig["cell_deg"], seed=cfg["seed"],
                        png=fig["png"])
