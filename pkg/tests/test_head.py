import dataclasses

import numpy as np
import pytest
import torch

from conftest import mini_vit
from cloudssl.config import vit_config
from cloudssl.head import (FinetuneRegime, apply_regime, batch_track_loss, build_head, finetune,
                           gather_track, load_encoder, predict_volume, track_loss, volume_forward)
from cloudssl.mae import build_mae, count_parameters
from cloudssl.sample_store import OverpassTrack
from cloudssl.training import Hyper
from test_mae import central_difference_check


def test_trainable_budgets():
    model = build_head(vit_config("small", 8))
    assert abs(count_parameters(model, trainable_only=True) / 22.7e6 - 1) <= 0.10
    apply_regime(model, "frozen_backbone")
    assert abs(count_parameters(model, trainable_only=True) / 345e3 - 1) <= 0.10


@pytest.mark.parametrize("p, stages", [(8, 3), (16, 4)])
def test_upsampling_stages_and_shape(p, stages):
    cfg = mini_vit(token_size=p, head_channels=(8,) * stages)
    model = build_head(cfg)
    n_up = sum(isinstance(m, torch.nn.ConvTranspose2d) for m in model.head.modules())
    assert n_up == stages
    out = model(torch.zeros(2, cfg.n_tokens, cfg.patch_dim), torch.zeros(2, cfg.n_tokens, cfg.embed_dim))
    assert out.shape == (2, 90, 32, 32)


def test_prediction_ignores_track(small_splits):
    torch.manual_seed(0)
    model = build_head(mini_vit(use_time=True, use_coords=True))
    s = small_splits["finetune_test"].samples[0]
    a = predict_volume(model, s)
    b = predict_volume(model, s)
    assert np.array_equal(a, b) and a.shape == (90, 32, 32)
    tr = s.track
    fake = OverpassTrack(tr.pixel_path[::-1].copy(), np.ones_like(tr.reflectivity), tr.cloud_type * 0,
                         1.0)
    assert np.array_equal(a, predict_volume(model, dataclasses.replace(s, track=fake)))
    assert np.array_equal(a, predict_volume(model, dataclasses.replace(s, track=None)))


def test_prediction_rejects_wrong_image(small_splits):
    model = build_head(mini_vit(image_size=64))
    with pytest.raises(ValueError):
        predict_volume(model, small_splits["finetune_test"].samples[0])


def test_gather_track_examples():
    vol = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    path = np.array([[0, 0], [1, 2], [2, 3]])
    assert gather_track(vol, path).tolist() == [[0, 6, 11], [12, 18, 23]]
    t = gather_track(torch.from_numpy(vol), path)
    assert t.tolist() == [[0, 6, 11], [12, 18, 23]]
    for bad in ([[3, 0]], [[0, 4]], [[-1, 0]]):
        with pytest.raises(IndexError):
            gather_track(vol, np.array(bad))
    with pytest.raises(ValueError):
        gather_track(vol, np.array([1, 2, 3]))


def test_track_loss_examples():
    t = torch.rand(90, 20)
    assert track_loss(t, t).item() == 0.0
    assert track_loss(t + 0.1, t).item() == pytest.approx(0.01, rel=1e-5)
    with pytest.raises(ValueError):
        track_loss(torch.zeros(90, 0), torch.zeros(90, 0))
    with pytest.raises(ValueError):
        track_loss(torch.zeros(90, 3), torch.zeros(90, 4))


def diagonal_track(z=4, length=6):
    path = np.stack([np.arange(length), np.arange(length)], 1).astype(np.int32)
    refl = np.random.default_rng(0).random((z, length)).astype(np.float32)
    return OverpassTrack(path, refl, np.zeros(length, np.int32), 0.5)


def test_off_track_gradient_is_exactly_zero():
    tr = diagonal_track()
    vol = torch.rand(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    batch_track_loss(vol, [tr]).backward()
    on = np.zeros((8, 8), bool)
    on[tr.pixel_path[:, 0], tr.pixel_path[:, 1]] = True
    g = vol.grad[0].numpy()
    assert np.all(g[:, ~on] == 0.0)
    assert np.all(g[:, on] != 0.0)
    # finite differences agree: moving an off-track voxel leaves the loss unchanged
    with torch.no_grad():
        base = batch_track_loss(vol, [tr]).item()
        vol[0, :, 0, 5] += 0.37
        assert batch_track_loss(vol, [tr]).item() == base


def head_gradient_error():
    torch.manual_seed(0)
    cfg = mini_vit(in_channels=2, n_levels=3, head_channels=(4, 4, 4))
    model = build_head(cfg).double()
    tokens = torch.rand(1, cfg.n_tokens, cfg.patch_dim, dtype=torch.float64)
    emb = torch.rand(1, cfg.n_tokens, cfg.embed_dim, dtype=torch.float64) * 0.1
    tr = diagonal_track(z=3, length=20)
    params = list(model.parameters())
    return central_difference_check(lambda: batch_track_loss(model(tokens, emb), [tr]), params)


def test_composed_gradient_matches_finite_differences():
    assert head_gradient_error() < 1e-4


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


@pytest.mark.parametrize("regime", ["frozen_backbone", "unfrozen_backbone"])
def test_regimes(regime, small_splits):
    torch.manual_seed(0)
    cfg = mini_vit()
    mae = build_mae(cfg)
    model = build_head(cfg)
    load_encoder(model, mae)
    enc0, head0 = snapshot(model.encoder), snapshot(model.head)
    assert all(torch.equal(enc0[k], v) for k, v in mae.encoder.state_dict().items())
    hyper = Hyper(lr=1e-3, batch_size=4, epochs=2, fraction=1.0, seed=0)
    state = finetune(model, regime, small_splits["finetune_train"], small_splits["finetune_val"], hyper)
    enc1, head1 = snapshot(model.encoder), snapshot(model.head)
    same_encoder = all(torch.equal(enc0[k], enc1[k]) for k in enc0)
    assert same_encoder == (regime == "frozen_backbone")
    assert not all(torch.equal(head0[k], head1[k]) for k in head0)
    assert len(state.history) == 2


def test_finetune_is_deterministic(small_splits):
    train = small_splits["finetune_train"].subset(small_splits["finetune_train"].ids[:4])
    val = small_splits["finetune_val"]
    hyper = Hyper(lr=1e-3, batch_size=2, epochs=1, fraction=1.0, seed=0)
    outs = []
    for _ in range(2):
        torch.manual_seed(0)
        model = build_head(mini_vit())
        finetune(model, FinetuneRegime.FROM_SCRATCH, train, val, hyper)
        model.eval()
        with torch.no_grad():
            outs.append(volume_forward(model, val, val.ids[:2]))
    assert torch.equal(outs[0], outs[1])


def test_finetune_rejects_missing_tracks(small_splits):
    train = small_splits["pretrain_train"]
    with pytest.raises(ValueError):
        finetune(build_head(mini_vit()), "from_scratch", train, small_splits["finetune_val"],
                 Hyper(epochs=1))


def test_unknown_regime():
    with pytest.raises(ValueError):
        apply_regime(build_head(mini_vit()), "half_frozen")
