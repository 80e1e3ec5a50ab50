import json

import pytest

from cloudssl import experiment as ex
from cloudssl.cli import main
from cloudssl.metrics import TABLE_METRICS, read_records


def write_config(path, root, **extra):
    doc = {"data": {"root": str(root), "generator": {"n_scenes": 40, "n_pretrain_scenes": 20,
                                                      "image_size": 32}},
           "model": {"scale": "desk", "token_size": 8, "embed_dim": 16, "depth": 1, "heads": 2,
                     "decoder_dim": 16, "decoder_depth": 1, "decoder_heads": 2,
                     "head_channels": [8, 8, 8]},
           "pretrain": {"epochs": 2, "fraction": 1.0, "lr": 1e-3},
           "finetune": {"epochs": 2, "fraction": 1.0, "lr": 1e-3},
           "unet": {"depth": 2, "base_channels": 4},
           "stats": {"k": 5, "n_boot": 200}}
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return str(path)


def test_defaults_and_seed_override():
    cfg = ex.resolve_config({}, seed=7)
    assert cfg["seed"] == 7 and cfg["variant"] == "mae"
    assert cfg["pretrain"]["mask_ratio"] == 0.75
    assert cfg["finetune"]["regime"] == "unfrozen_backbone"


@pytest.mark.parametrize("doc", [
    {"learning_rate": 1e-3},
    {"pretrain": {"lr": -1.0}},
    {"pretrain": {"mask_ratio": 1.0}},
    {"finetune": {"regime": "partly_frozen"}},
    {"model": {"token_size": 12}},
    {"variant": "satmae+time+coords+extra"},
])
def test_schema_errors(doc):
    with pytest.raises(ex.ConfigError):
        ex.resolve_config(doc)


def test_variant_matrix():
    m = ex.variant_matrix({"model": {"scale": "desk"}})
    assert len(m) == 6
    flags = {name: (c["variant"], ex.VARIANTS[c["variant"]]) for name, c in m.items()}
    assert flags["satmae+time"][1] == (True, False)
    assert flags["satmae+coords"][1] == (False, True)
    assert flags["satmae+time+coords"][1] == (True, True)
    assert flags["unet"][1] is None
    enc = ex.vit_from_config(m["satmae+time+coords"]).encoding
    assert enc.use_time and enc.use_coords
    with pytest.raises(ex.ConfigError):
        ex.vit_from_config(m["unet"])


def test_device_env(monkeypatch):
    monkeypatch.setenv(ex.DEVICE_ENV, "cpu")
    assert ex.device().type == "cpu"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    root = base / "data"
    cfg = write_config(base / "cfg.json", root)
    ucfg = write_config(base / "unet.json", root, variant="unet",
                        finetune={"epochs": 2, "fraction": 1.0, "lr": 1e-3, "regime": "from_scratch"})
    assert main(["gen-data", "--config", cfg, "--out", str(root)]) == 0
    assert main(["pretrain", "--config", cfg, "--out", str(base / "pt")]) == 0
    ck = str(base / "pt" / "checkpoints" / "best")
    for run in ("ft", "ft2"):
        assert main(["finetune", "--config", cfg, "--out", str(base / run), "--ckpt", ck]) == 0
        assert main(["evaluate", "--config", cfg, "--out", str(base / f"ev_{run}"),
                     "--ckpt", str(base / run / "checkpoints" / "best")]) == 0
    assert main(["finetune", "--config", ucfg, "--out", str(base / "ftu")]) == 0
    assert main(["evaluate", "--config", ucfg, "--out", str(base / "evu"),
                 "--ckpt", str(base / "ftu" / "checkpoints" / "best")]) == 0
    return base, cfg


def test_rerun_reproduces_records(pipeline):
    base, _ = pipeline
    a = read_records(base / "ev_ft" / "records.jsonl")
    b = read_records(base / "ev_ft2" / "records.jsonl")
    assert a == b and len(a) > 0


def test_provenance_chain(pipeline):
    base, _ = pipeline
    prov = json.loads((base / "ev_ft" / "provenance.json").read_text())
    parent = prov["parent"]
    assert parent["stage"] == "finetune" and parent["parent"]["stage"] == "pretrain"
    pt = json.loads((base / "pt" / "provenance.json").read_text())
    assert parent["parent"]["checkpoint_id"] == pt["checkpoint_id"]
    assert prov["data"]["digest"] == pt["data"]["digest"]


def test_reused_out_dir_with_other_config(pipeline, tmp_path, capsys):
    base, cfg = pipeline
    other = write_config(tmp_path / "c.json", base / "data", seed=5)
    assert main(["pretrain", "--config", other, "--out", str(base / "pt")]) == 2
    assert "different run" in capsys.readouterr().err


def test_evaluate_rejects_pretrain_checkpoint(pipeline, tmp_path):
    base, cfg = pipeline
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "e"),
                 "--ckpt", str(base / "pt" / "checkpoints" / "best")]) == 2


def test_finetune_rejects_mismatched_variant(pipeline, tmp_path):
    base, _ = pipeline
    cfg = write_config(tmp_path / "c.json", base / "data", variant="satmae+time")
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "f"),
                 "--ckpt", str(base / "pt" / "checkpoints" / "best")]) == 2


def test_finetune_needs_ckpt(pipeline, tmp_path):
    base, cfg = pipeline
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "f")]) == 2


def test_provenance_detects_changed_data(pipeline, tmp_path):
    base, cfg = pipeline
    other_root = tmp_path / "data2"
    cfg2 = write_config(tmp_path / "c.json", other_root,
                        data={"root": str(other_root),
                              "generator": {"seed": 9, "n_scenes": 40, "n_pretrain_scenes": 20,
                                            "image_size": 32}})
    assert main(["gen-data", "--config", cfg2, "--out", str(other_root)]) == 0
    assert main(["evaluate", "--config", cfg2, "--out", str(tmp_path / "e"),
                 "--ckpt", str(base / "ft" / "checkpoints" / "best")]) == 2


def test_compare_table(pipeline, capsys):
    base, _ = pipeline
    recs = {f"m{i}": str(base / ("ev_ft" if i % 2 else "evu") / "records.jsonl") for i in range(6)}
    capsys.readouterr()
    assert main(["compare", "--out", str(base / "cmp")] + [f"{k}={v}" for k, v in recs.items()]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 2 + len(TABLE_METRICS)
    assert all(f"m{i}" in table[0] for i in range(6))
    doc = json.loads((base / "cmp" / "table.json").read_text())
    assert set(doc["table"]) == set(recs) and len(doc["metrics"]) == 6


def test_stats_test_json(pipeline, capsys):
    base, cfg = pipeline
    capsys.readouterr()
    assert main(["stats-test", "--config", cfg, str(base / "ev_ft" / "records.jsonl"),
                 str(base / "evu" / "records.jsonl")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0 < rep["p_value"] <= 1 and 0 <= rep["observed_proportion"] <= 1
    assert rep["metric"] == "rmse_dbz"


def test_stats_test_on_identical_records(pipeline, capsys):
    base, cfg = pipeline
    recs = str(base / "ev_ft" / "records.jsonl")
    assert main(["stats-test", "--config", cfg, recs, recs]) == 2
    assert "score differences" in capsys.readouterr().err


def test_figures(pipeline):
    base, cfg = pipeline
    out = base / "figs"
    assert main(["figures", "--config", cfg, "--out", str(out),
                 "--ckpt", str(base / "pt" / "checkpoints" / "best"),
                 "--ckpt", str(base / "ft" / "checkpoints" / "best"),
                 "--run", str(base / "pt"), "--records", f"mae={base / 'ev_ft' / 'records.jsonl'}"]) == 0
    assert any(out.iterdir())


def test_bad_named_path(pipeline):
    assert main(["compare", "oops"]) == 2
