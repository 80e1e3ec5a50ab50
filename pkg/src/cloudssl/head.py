"""Volume-regression head, overpass-slice loss and the fine-tuning loop."""
from __future__ import annotations

import enum
import logging

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import TrainState, load_tensors
from .config import ViTConfig
from .data import SplitData, token_embedding
from .mae import MaskedAutoencoder, ViTEncoder
from .sample_store import OverpassTrack, SceneSample
from .tokenizer import patchify
from .training import Hyper, fit, make_optimizer

log = logging.getLogger(__name__)


class FinetuneRegime(str, enum.Enum):
    FROM_SCRATCH = "from_scratch"
    FROZEN = "frozen_backbone"
    UNFROZEN = "unfrozen_backbone"


class VolumeHead(nn.Module):
    """Token map [B, D, g, g] -> volume [B, Z, g*p, g*p] via stride-2 transposed convolutions."""

    def __init__(self, in_dim: int, channels: tuple[int, ...], n_levels: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for ch in channels:
            layers += [nn.ConvTranspose2d(prev, ch, kernel_size=2, stride=2), nn.GELU()]
            prev = ch
        self.up = nn.Sequential(*layers)
        self.out = nn.Conv2d(prev, n_levels, kernel_size=1)

    def forward(self, x):
        return self.out(self.up(x))


class CloudRegressor(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg)
        self.head = VolumeHead(cfg.embed_dim, cfg.head_channels, cfg.n_levels)

    def forward(self, tokens, emb):
        """tokens [B, T, P], emb [B, T, D] -> volume [B, Z, H, W]."""
        x = self.encoder(tokens, emb)
        b, t, d = x.shape
        g = self.cfg.grid_size
        return self.head(x.transpose(1, 2).reshape(b, d, g, g))


def build_head(cfg: ViTConfig) -> CloudRegressor:
    if cfg.image_size != cfg.grid_size * cfg.token_size:
        raise ValueError("unsupported token grid")
    return CloudRegressor(cfg)


def load_encoder(model: CloudRegressor, source) -> None:
    """Copy encoder weights from a :class:`MaskedAutoencoder` or an MAE checkpoint path."""
    if isinstance(source, MaskedAutoencoder):
        state = source.encoder.state_dict()
    else:
        state = load_tensors(source, prefix="encoder.")
    model.encoder.load_state_dict(state)


def apply_regime(model: nn.Module, regime: FinetuneRegime | str) -> None:
    regime = FinetuneRegime(regime)
    encoder = getattr(model, "encoder", None)
    if encoder is not None:
        encoder.requires_grad_(regime is not FinetuneRegime.FROZEN)


def volume_forward(model: nn.Module, data: SplitData, ids: list[str]) -> torch.Tensor:
    """Predicted normalized volumes [B, Z, H, W] for ``ids`` of ``data``.

    Only images and the model's encodings are consumed; tracks never are.
    """
    ref = next(model.parameters())
    images = data.images(ids, ref.dtype, ref.device)
    if isinstance(model, CloudRegressor):
        cfg = model.cfg
        emb = data.embeddings(ids, cfg.encoding, cfg.token_size, ref.dtype, ref.device)
        return model(patchify(images, cfg.token_size), emb)
    return model(images)


def predict_volume(model: nn.Module, sample: SceneSample) -> np.ndarray:
    """Full [Z, H, W] reflectivity volume (normalized units) for one sample."""
    model.eval()
    ref = next(model.parameters())
    image = torch.from_numpy(np.ascontiguousarray(sample.image)).to(ref.device, ref.dtype).unsqueeze(0)
    with torch.no_grad():
        if isinstance(model, CloudRegressor):
            cfg = model.cfg
            if sample.image.shape != (cfg.in_channels, cfg.image_size, cfg.image_size):
                raise ValueError(f"image shape {sample.image.shape} does not match the model")
            g = (cfg.grid_size, cfg.grid_size)
            emb = token_embedding(cfg.encoding, g, cfg.token_size, sample.timestamp, sample.latlon)
            emb = torch.from_numpy(emb).to(ref.device, ref.dtype).unsqueeze(0)
            out = model(patchify(image, cfg.token_size), emb)
        else:
            out = model(image)
    return out[0].float().cpu().numpy()


def gather_track(volume, track_or_path):
    """Volume [Z, H, W] (numpy or torch) sampled along a pixel path -> slice [Z, L]."""
    path = track_or_path.pixel_path if isinstance(track_or_path, OverpassTrack) else track_or_path
    path = np.asarray(path)
    _, h, w = volume.shape
    if path.ndim != 2 or path.shape[1] != 2:
        raise ValueError("pixel path must be [L, 2]")
    if (path[:, 0].min() < 0 or path[:, 0].max() >= h
            or path[:, 1].min() < 0 or path[:, 1].max() >= w):
        raise IndexError("track leaves the volume")
    rows, cols = path[:, 0], path[:, 1]
    if isinstance(volume, torch.Tensor):
        rows = torch.from_numpy(rows).long().to(volume.device)
        cols = torch.from_numpy(cols).long().to(volume.device)
    return volume[:, rows, cols]


def track_loss(pred, target):
    """Mean squared error over all Z * L entries of an overpass slice."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[-1] == 0:
        raise ValueError("empty track")
    return ((pred - target) ** 2).mean()


def batch_track_loss(volumes: torch.Tensor, tracks: list[OverpassTrack]) -> torch.Tensor:
    """Batch mean of per-sample track MSE."""
    losses = []
    for vol, tr in zip(volumes, tracks):
        target = torch.from_numpy(tr.reflectivity).to(vol.device, vol.dtype)
        losses.append(track_loss(gather_track(vol, tr), target))
    return torch.stack(losses).mean()


def slice_validation(model: nn.Module, data: SplitData, batch_size: int = 8) -> dict:
    """Mean per-sample track MSE, PSNR and SSIM over a split."""
    from .metrics import psnr, ssim

    mse, p, s = [], [], []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            ids = data.ids[start:start + batch_size]
            vols = volume_forward(model, data, ids)
            for vol, tr in zip(vols, data.tracks(ids)):
                pred = gather_track(vol, tr).double().cpu().numpy()
                target = tr.reflectivity.astype(np.float64)
                mse.append(float(np.mean((pred - target) ** 2)))
                p.append(psnr(pred, target))
                s.append(ssim(np.clip(pred, 0, 1), target))
    p_finite = [v for v in p if np.isfinite(v)]
    return {"loss": float(np.mean(mse)),
            "psnr": float(np.mean(p_finite)) if p_finite else float("inf"),
            "ssim": float(np.mean(s))}


def finetune(model: nn.Module, regime: FinetuneRegime | str, train: SplitData, val: SplitData,
             hyper: Hyper, state: TrainState | None = None, out_dir=None,
             header: dict | None = None) -> TrainState:
    """Train on overpass slices only; the loss never sees off-track voxels.

    ``model`` must already carry its initial weights (fresh for
    ``from_scratch``, pre-trained encoder otherwise). In the frozen regime
    the encoder receives no updates.
    """
    regime = FinetuneRegime(regime)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fine-tuning needs non-empty train and validation splits")
    missing = [s.id for s in train.samples if s.track is None]
    if missing:
        raise ValueError(f"{len(missing)} training samples have no overpass track")
    apply_regime(model, regime)
    if state is None:
        state = TrainState(model=model, optimizer=make_optimizer(model, hyper.lr), seed=hyper.seed)

    def step_loss(ids, epoch, b):
        if regime is FinetuneRegime.FROZEN and hasattr(model, "encoder"):
            model.encoder.eval()
        return batch_track_loss(volume_forward(model, train, ids), train.tracks(ids))

    def validate():
        return slice_validation(model, val)

    hdr = {"kind": type(model).__name__, "regime": regime.value, "hyper": hyper.to_json()}
    cfg = getattr(model, "cfg", None)
    if cfg is not None:
        hdr["config"] = cfg.to_json()
    hdr.update(header or {})
    torch.manual_seed(hyper.seed)
    fit(state, train, hyper, step_loss, validate, out_dir=out_dir, header=hdr)
    return state
